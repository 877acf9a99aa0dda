"""Feature-aware filters applied inside the attention blocks: Gabor bank and Otsu gate."""

from abc import ABC, abstractmethod
from typing import Literal

import numpy as np
import numpy.typing as npt
import torch
import torch.nn.functional as F
from torch import nn

from .config import GaborConfig
from .errors import RejectedInputError

FilterKind = Literal["gabor", "otsu"]

GABOR_KERNEL_SIZE = 7


def gabor_kernel(
    theta: float, config: GaborConfig, size: int = GABOR_KERNEL_SIZE
) -> npt.NDArray[np.float64]:
    """Real Gabor kernel; x runs along columns, y along rows."""
    half = size // 2
    y, x = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    x_theta = x * np.cos(theta) + y * np.sin(theta)
    y_theta = -x * np.sin(theta) + y * np.cos(theta)
    envelope = np.exp(-(x_theta**2 + config.aspect**2 * y_theta**2) / (2 * config.sigma**2))
    carrier = np.cos(2 * np.pi * x_theta / config.wavelength + config.phase)
    return envelope * carrier


def gabor_bank(config: GaborConfig, size: int = GABOR_KERNEL_SIZE) -> npt.NDArray[np.float64]:
    """Kernels for orientations k*pi/n, k = 0..n-1, stacked as (n, size, size)."""
    n = config.orientations
    return np.stack([gabor_kernel(k * np.pi / n, config, size) for k in range(n)])


def otsu_threshold(values: npt.ArrayLike, bins: int = 256) -> float:
    """
    Otsu threshold of `values` over a `bins`-bin histogram spanning [min, max].

    Returns the lowest bin edge maximising between-class variance; a constant
    input returns its value.
    """
    data = np.asarray(values, dtype=np.float64).ravel()
    if data.size == 0:
        raise RejectedInputError("otsu_threshold needs at least one value")
    if not np.isfinite(data).all():
        raise RejectedInputError("otsu_threshold input contains non-finite values")
    if bins < 2:
        raise RejectedInputError(f"bins must be >= 2, got {bins}")
    lo, hi = float(data.min()), float(data.max())
    if lo == hi:
        return lo

    index = np.minimum(((data - lo) * bins / (hi - lo)).astype(np.int64), bins - 1)
    counts = np.bincount(index, minlength=bins).astype(np.int64)
    weighted = counts * np.arange(bins, dtype=np.int64)
    n0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(weighted)[:-1]
    n1 = counts.sum() - n0
    s1 = weighted.sum() - s0
    # omega0*omega1*(mu0-mu1)^2 up to the constant factor 1/N^2
    spread = (s0 * n1 - s1 * n0).astype(np.float64)
    denom = (n0 * n1).astype(np.float64)
    score = np.where(denom > 0, spread * spread / np.where(denom > 0, denom, 1.0), 0.0)
    k = int(np.argmax(score)) + 1
    return lo + k * (hi - lo) / bins


def otsu_thresholds(x: torch.Tensor, bins: int = 256) -> torch.Tensor:
    """Per-(sample, channel) Otsu thresholds of an N x C x H x W tensor, shape N x C x 1 x 1."""
    n, c = x.shape[:2]
    flat = x.detach().reshape(n * c, -1)
    lo = flat.min(dim=1).values
    hi = flat.max(dim=1).values
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))

    index = ((flat - lo[:, None]) * bins / safe[:, None]).long().clamp_(0, bins - 1)
    counts = torch.zeros(n * c, bins, dtype=torch.int64, device=x.device)
    counts.scatter_add_(1, index, torch.ones_like(index))
    weighted = counts * torch.arange(bins, device=x.device)
    n0 = counts.cumsum(1)[:, :-1]
    s0 = weighted.cumsum(1)[:, :-1]
    n1 = counts.sum(1, keepdim=True) - n0
    s1 = weighted.sum(1, keepdim=True) - s0
    spread = (s0 * n1 - s1 * n0).to(torch.float64)
    denom = (n0 * n1).to(torch.float64)
    score = torch.where(denom > 0, spread * spread / denom.clamp(min=1.0), torch.zeros_like(denom))
    k = score.argmax(dim=1) + 1

    threshold = lo + k.to(x.dtype) * span / bins
    threshold = torch.where(span > 0, threshold, lo)
    return threshold.reshape(n, c, 1, 1)


class FeatureFilter(nn.Module, ABC):
    """A fixed, non-learnable filter Gamma applied to attention output."""

    kind: FilterKind

    @abstractmethod
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Filter an N x C x H x W tensor, preserving its shape."""


class GaborFilter(FeatureFilter):
    """Depthwise Gabor filtering, averaged over the orientation bank."""

    kind: FilterKind = "gabor"

    def __init__(self, config: GaborConfig):
        super().__init__()
        bank = torch.from_numpy(gabor_bank(config))
        # averaging responses equals filtering with the averaged kernel
        self.register_buffer("kernel", bank.mean(dim=0)[None, None], persistent=False)
        self.pad = GABOR_KERNEL_SIZE // 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c = x.shape[1]
        weight = self.kernel.to(dtype=x.dtype).expand(c, 1, -1, -1)
        padded = F.pad(x, (self.pad,) * 4, mode="replicate")
        return F.conv2d(padded, weight, groups=c)


class OtsuGate(FeatureFilter):
    """Keep activations at or above each channel's Otsu threshold."""

    kind: FilterKind = "otsu"

    def __init__(self, bins: int = 256):
        super().__init__()
        self.bins = bins

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # threshold is computed on detached values and acts as a constant
        gate = (x.detach() >= otsu_thresholds(x, self.bins)).to(x.dtype)
        return x * gate


def create_filter(kind: str, gabor: GaborConfig, otsu_bins: int) -> FeatureFilter:
    """Factory for the filter assigned to a branch."""
    if kind == "gabor":
        return GaborFilter(gabor)
    elif kind == "otsu":
        return OtsuGate(otsu_bins)
    else:
        raise ValueError(f"Unsupported filter kind: {kind}. Supported kinds: gabor, otsu")
