"""Exception hierarchy shared by the library and the CLI."""


class UgmcsError(Exception):
    """Base class for all errors raised by ugmcs_net."""

    exit_code = 1


class ConfigError(UgmcsError, ValueError):
    """Configuration failed validation."""

    exit_code = 2


class RejectedInputError(UgmcsError, ValueError):
    """Input violates an operation's preconditions (shape, range, count)."""

    exit_code = 3


class DegenerateInputError(UgmcsError, ValueError):
    """Input is well formed but carries no usable spread."""

    exit_code = 3


class DataLoadError(UgmcsError, ValueError):
    """A manifest or one of the raw files it references could not be loaded."""

    exit_code = 3


class NumericFaultError(UgmcsError, ArithmeticError):
    """Non-finite parameters, activations or losses."""

    exit_code = 4
