"""Segmentation metrics, HU kernel density estimation and paired t-tests."""

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
import pandas as pd
from scipy import integrate, ndimage, stats

from .errors import DegenerateInputError, RejectedInputError

ArrayLike = npt.ArrayLike

# 4-connectivity
_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class MetricsRecord:
    """Per-sample segmentation scores."""

    sample_id: str
    dsc: float
    iou: float
    nsd: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class KdeCurve:
    """Gaussian KDE evaluated on a uniform HU grid."""

    grid: npt.NDArray[np.float64]
    density: npt.NDArray[np.float64]
    bandwidth: float

    def integral(self) -> float:
        return float(integrate.trapezoid(self.density, self.grid))

    def mode(self) -> float:
        return float(self.grid[int(np.argmax(self.density))])

    def to_csv(self, path: Union[str, Path]) -> None:
        pd.DataFrame({"hu": self.grid, "density": self.density}).to_csv(
            path, index=False, float_format="%.10g"
        )


@dataclass(frozen=True)
class PairedTestResult:
    """Two-sided paired t-test on per-sample differences."""

    t_value: float
    p_value: float
    n: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _pair(pred: ArrayLike, gt: ArrayLike) -> Tuple[npt.NDArray[np.bool_], npt.NDArray[np.bool_]]:
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise RejectedInputError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p != 0, g != 0


def dsc(pred: ArrayLike, gt: ArrayLike) -> float:
    """Dice similarity coefficient; two empty masks score 1."""
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def iou(pred: ArrayLike, gt: ArrayLike) -> float:
    """Intersection over union; two empty masks score 1."""
    p, g = _pair(pred, gt)
    joint = int((p | g).sum())
    if joint == 0:
        return 1.0
    return int((p & g).sum()) / joint


def boundary(mask: ArrayLike) -> npt.NDArray[np.bool_]:
    """Foreground pixels with a 4-connected background or off-grid neighbour."""
    m = np.asarray(mask) != 0
    eroded = ndimage.binary_erosion(m, structure=_CROSS, border_value=0)
    return m & ~eroded


def _distance_to(surface: npt.NDArray[np.bool_]) -> npt.NDArray[np.float64]:
    if not surface.any():
        return np.full(surface.shape, np.inf)
    return np.asarray(ndimage.distance_transform_edt(~surface), dtype=np.float64)


def nsd(pred: ArrayLike, gt: ArrayLike, tolerance: float = 1.0) -> float:
    """
    Normalized surface Dice at `tolerance` pixels.

    Boundary pixels of each mask count as matched when their Euclidean
    distance to the other mask's boundary is within the tolerance.
    """
    if tolerance < 0:
        raise RejectedInputError(f"tolerance must be >= 0, got {tolerance}")
    p, g = _pair(pred, gt)
    bp, bg = boundary(p), boundary(g)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p + n_g == 0:
        return 1.0
    matched_p = int((_distance_to(bg)[bp] <= tolerance).sum())
    matched_g = int((_distance_to(bp)[bg] <= tolerance).sum())
    return (matched_p + matched_g) / (n_p + n_g)


def score(sample_id: str, pred: ArrayLike, gt: ArrayLike, tolerance: float = 1.0) -> MetricsRecord:
    return MetricsRecord(sample_id, dsc(pred, gt), iou(pred, gt), nsd(pred, gt, tolerance))


def containment_rate(seg: ArrayLike, union_pred: ArrayLike, inter_pred: ArrayLike) -> float:
    """Fraction of pixels where intersection <= segmentation <= union holds."""
    s = np.asarray(seg) != 0
    u = np.asarray(union_pred) != 0
    i = np.asarray(inter_pred) != 0
    if not (s.shape == u.shape == i.shape):
        raise RejectedInputError(f"shapes differ: {s.shape}, {u.shape}, {i.shape}")
    inside = (~i | s) & (~s | u)
    return float(inside.mean())


def kde(values: ArrayLike, grid_points: int = 512) -> KdeCurve:
    """Gaussian KDE with Silverman's bandwidth 1.06 * sd * n^(-1/5)."""
    data = np.asarray(values, dtype=np.float64).ravel()
    if data.size < 2:
        raise DegenerateInputError(f"kde needs at least 2 values, got {data.size}")
    if not np.isfinite(data).all():
        raise RejectedInputError("kde input contains non-finite values")
    sd = float(np.std(data, ddof=1))
    if sd == 0.0:
        raise DegenerateInputError("kde input has zero spread")
    if grid_points < 2:
        raise RejectedInputError(f"grid_points must be >= 2, got {grid_points}")

    factor = 1.06 * data.size ** (-1 / 5)
    bandwidth = factor * sd
    # gaussian_kde scales the sample covariance (ddof=1) by factor**2
    estimator = stats.gaussian_kde(data, bw_method=factor)
    grid = np.linspace(data.min() - 4 * bandwidth, data.max() + 4 * bandwidth, grid_points)
    density = np.clip(estimator(grid), 0.0, None)
    return KdeCurve(grid=grid, density=density, bandwidth=bandwidth)


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> PairedTestResult:
    """
    Two-sided paired t-test on d = a - b.

    Zero-variance differences follow fixed conventions: a zero mean gives
    t = 0, p = 1; a non-zero mean gives t = +/-inf, p = 0.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise RejectedInputError(f"paired samples differ in length: {x.shape} vs {y.shape}")
    n = int(x.size)
    if n < 2:
        raise RejectedInputError(f"paired t-test needs n >= 2, got {n}")

    d = x - y
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return PairedTestResult(t_value=0.0, p_value=1.0, n=n)
        return PairedTestResult(t_value=math.copysign(math.inf, mean), p_value=0.0, n=n)

    t = mean / (sd / math.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), df=n - 1))
    return PairedTestResult(t_value=t, p_value=min(max(p, 0.0), 1.0), n=n)


def write_metrics_csv(records: Sequence[MetricsRecord], path: Union[str, Path]) -> None:
    """Write rows {sample_id, dsc, iou, nsd} with a header line."""
    frame = pd.DataFrame(
        [r.to_dict() for r in records], columns=["sample_id", "dsc", "iou", "nsd"]
    )
    frame.to_csv(path, index=False, float_format="%.10g")
