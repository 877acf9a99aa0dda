"""Configuration handling for UGMCS-Net runs."""

import json
import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

FilterName = Literal["gabor", "otsu"]
FusionReduction = Literal["mean", "sum"]
VariantName = Literal["ugmcs", "v1", "phi_a", "phi_b", "phi_ab", "iucm", "backbone", "unet"]


class StrictModel(BaseModel):
    """Base model that rejects unknown keys."""

    model_config = ConfigDict(extra="forbid")


class GaborConfig(StrictModel):
    """Fixed Gabor bank used by the Gabor feature filter."""

    orientations: int = Field(ge=1, default=4)
    wavelength: float = Field(gt=0, default=4.0)
    sigma: float = Field(gt=0, default=2.0)
    aspect: float = Field(gt=0, default=0.5)
    phase: float = 0.0


class BranchToggles(StrictModel):
    """Switches for the uncertainty-aware and intersection-union modules."""

    use_uam: bool = True
    use_iucm: bool = True


class FilterAssignment(StrictModel):
    """Feature-aware filter per branch."""

    uni: FilterName = "gabor"
    lc: FilterName = "gabor"
    hc: FilterName = "otsu"


class NetConfig(StrictModel):
    """Network architecture hyperparameters."""

    depth: int = Field(ge=1, default=5)
    base_channels: int = Field(ge=1, default=32)
    feature_channels: int = Field(ge=1, default=32)
    input_size: int = Field(ge=1, default=64)
    attention_channels: int = Field(ge=1, default=8)
    attention_gates: bool = True
    gabor: GaborConfig = Field(default_factory=GaborConfig)
    otsu_bins: int = Field(ge=2, default=256)
    branch_toggles: BranchToggles = Field(default_factory=BranchToggles)
    filters: FilterAssignment = Field(default_factory=FilterAssignment)

    @model_validator(mode="after")
    def _check_geometry(self) -> "NetConfig":
        if self.input_size % (2**self.depth) != 0:
            raise ValueError(
                f"input_size {self.input_size} must be divisible by 2**depth = {2**self.depth}"
            )
        if self.branch_toggles.use_iucm and not self.branch_toggles.use_uam:
            raise ValueError("use_iucm requires use_uam")
        return self


class TrainConfig(StrictModel):
    """Optimiser and schedule settings."""

    lr_max: float = Field(gt=0, default=1e-5)
    lr_min: float = Field(ge=0, default=0.0)
    momentum: float = Field(ge=0, lt=1, default=0.9)
    weight_decay: float = Field(ge=0, default=1e-4)
    batch_size: int = Field(ge=1, default=32)
    epochs: int = Field(ge=1, default=200)
    restart_period: int = Field(ge=1, default=50)
    seed: int = 0

    @model_validator(mode="after")
    def _check_lr(self) -> "TrainConfig":
        if not self.lr_max > self.lr_min:
            raise ValueError(f"lr_max ({self.lr_max}) must exceed lr_min ({self.lr_min})")
        return self


class LossWeights(StrictModel):
    """Coefficients of the weighted objective."""

    alpha1: float = Field(ge=0, default=0.5)
    alpha2: float = Field(ge=0, default=0.5)
    alpha3: float = Field(ge=0, default=1.0)

    @model_validator(mode="after")
    def _not_all_zero(self) -> "LossWeights":
        if self.alpha1 == self.alpha2 == self.alpha3 == 0:
            raise ValueError("loss weights must not all be zero")
        return self


class FusionTargets(StrictModel):
    """Heads trained against the whole annotation set rather than one label."""

    phi_a: bool = True
    phi_b: bool = True


class LossConfig(StrictModel):
    weights: LossWeights = Field(default_factory=LossWeights)
    fusion_reduction: FusionReduction = "mean"
    fusion_targets: FusionTargets = Field(default_factory=FusionTargets)
    # label used by heads whose fusion target is disabled
    annotation_index: int = Field(ge=0, le=3, default=0)


class EvalConfig(StrictModel):
    annotation_index: int = Field(ge=0, le=3, default=0)
    threshold: float = Field(gt=0, lt=1, default=0.5)
    nsd_tolerance: float = Field(ge=0, default=1.0)


class RunConfig(StrictModel):
    """Complete configuration for a training / evaluation run."""

    dataset: Path
    out_dir: Path = Path("runs/default")
    seed: int = 0
    folds: int = Field(ge=2, default=5)
    variant: Optional[VariantName] = None
    net: NetConfig = Field(default_factory=NetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)


# Overrides reproducing the ablation rows; applied on top of the file values.
VARIANTS: Dict[str, Dict[str, Any]] = {
    "ugmcs": {},
    "v1": {
        "net": {"branch_toggles": {"use_iucm": False}},
        "loss": {"fusion_targets": {"phi_a": False, "phi_b": False}},
    },
    "phi_a": {
        "net": {"branch_toggles": {"use_iucm": False}},
        "loss": {"fusion_targets": {"phi_a": True, "phi_b": False}},
    },
    "phi_b": {
        "net": {"branch_toggles": {"use_iucm": False}},
        "loss": {"fusion_targets": {"phi_a": False, "phi_b": True}},
    },
    "phi_ab": {
        "net": {"branch_toggles": {"use_iucm": False}},
        "loss": {"fusion_targets": {"phi_a": True, "phi_b": True}},
    },
    "iucm": {
        "loss": {"fusion_targets": {"phi_a": False, "phi_b": False}},
    },
    "backbone": {
        "net": {"branch_toggles": {"use_uam": False, "use_iucm": False}},
    },
    "unet": {
        "net": {"branch_toggles": {"use_uam": False, "use_iucm": False}, "attention_gates": False},
    },
}


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _format_errors(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def _conflicts(data: Dict[str, Any], preset: Dict[str, Any], prefix: str = "") -> List[str]:
    found = []
    for key, value in preset.items():
        if key not in data:
            continue
        path = f"{prefix}{key}"
        if isinstance(value, dict) and isinstance(data[key], dict):
            found.extend(_conflicts(data[key], value, f"{path}."))
        elif data[key] != value:
            found.append(f"{path}={data[key]!r} (preset sets {value!r})")
    return found


def build_config(data: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Validate raw config data merged with `overrides`, then apply the variant preset.

    An explicit value that contradicts the chosen preset is rejected.
    """
    merged = _merge(data, overrides or {})
    variant = merged.get("variant")
    if variant is not None:
        if variant not in VARIANTS:
            raise ConfigError(
                f"variant: unknown preset {variant!r}; choose from {sorted(VARIANTS)}"
            )
        conflicts = _conflicts(merged, VARIANTS[variant])
        if conflicts:
            raise ConfigError(f"variant {variant!r} conflicts with " + ", ".join(conflicts))
        merged = _merge(merged, VARIANTS[variant])
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(_format_errors(e)) from e


def load_config(
    config_path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """Load configuration from a YAML or JSON file."""
    with open(config_path) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{config_path}: top level must be a mapping")
    return build_config(data, overrides)


def config_echo(config: BaseModel) -> Dict[str, Any]:
    """JSON-safe dump of a config model."""
    return json.loads(config.model_dump_json())


def save_config_echo(config: BaseModel, output_path: Union[str, Path]) -> None:
    """Write the resolved config so the run can be reproduced from it."""
    with open(output_path, "w") as f:
        json.dump(config_echo(config), f, indent=2, sort_keys=True)
        f.write("\n")


def _json_safe(value: Any) -> Any:
    """NaN becomes null and infinities become the strings "inf" / "-inf"."""
    if isinstance(value, float):
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def save_results(results: Dict[str, Any], output_path: Union[str, Path]) -> None:
    """Save a report dictionary as strict JSON."""
    with open(output_path, "w") as f:
        json.dump(_json_safe(results), f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")
