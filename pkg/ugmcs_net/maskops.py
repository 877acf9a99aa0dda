"""Binary mask algebra over annotation sets and Multi-Confidence Mask composition."""

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, TypeVar

import numpy as np
import numpy.typing as npt
import torch

from .errors import RejectedInputError

Mask = npt.NDArray[np.uint8]
GridT = TypeVar("GridT", npt.NDArray[np.floating], torch.Tensor)

MIN_ANNOTATIONS = 2
MAX_ANNOTATIONS = 4


@dataclass(frozen=True)
class AnnotationSet:
    """The expert masks drawn for one nodule."""

    masks: Tuple[Mask, ...]
    sample_id: str = ""

    @classmethod
    def of(cls, masks: Sequence[npt.ArrayLike], sample_id: str = "") -> "AnnotationSet":
        """Build a set from anything array-like, casting each mask to uint8."""
        return cls(tuple(np.asarray(m).astype(np.uint8) for m in masks), sample_id)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.masks[0].shape if self.masks else ()

    def __len__(self) -> int:
        return len(self.masks)


@dataclass
class ValidationReport:
    """Outcome of validate_annotation_set; `violations` is empty when it passes."""

    sample_id: str
    violations: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _stack(annotations: AnnotationSet) -> npt.NDArray[np.uint8]:
    if len(annotations) == 0:
        raise RejectedInputError(f"{annotations.sample_id or 'set'}: no masks")
    shapes = {m.shape for m in annotations.masks}
    if len(shapes) != 1:
        raise RejectedInputError(
            f"{annotations.sample_id or 'set'}: mask shapes differ: {sorted(shapes)}"
        )
    if annotations.masks[0].ndim != 2:
        raise RejectedInputError(
            f"{annotations.sample_id or 'set'}: masks must be 2-D, "
            f"got {annotations.masks[0].ndim}-D"
        )
    return np.stack([m != 0 for m in annotations.masks]).astype(np.uint8)


def union(annotations: AnnotationSet) -> Mask:
    """Pixels marked by at least one annotator."""
    return _stack(annotations).max(axis=0)


def intersection(annotations: AnnotationSet) -> Mask:
    """Pixels marked by every annotator (the high-confidence mask)."""
    return _stack(annotations).min(axis=0)


def lc_mask(annotations: AnnotationSet) -> Mask:
    """Pixels where annotators disagree: union minus intersection."""
    stacked = _stack(annotations)
    return (stacked.max(axis=0) & (1 - stacked.min(axis=0))).astype(np.uint8)


def compose_mcm(u: GridT, i: GridT) -> GridT:
    """
    Combine a union field and an intersection field into a Multi-Confidence Mask.

    The normalisation is division by two, so hard binary inputs give 1 on the
    high-confidence region, 0.5 on the low-confidence ring and 0 elsewhere.
    Works on numpy arrays and torch tensors alike.
    """
    if tuple(u.shape) != tuple(i.shape):
        raise RejectedInputError(
            f"union/intersection shapes differ: {tuple(u.shape)} vs {tuple(i.shape)}"
        )
    for name, grid in (("union", u), ("intersection", i)):
        if bool(((grid < 0) | (grid > 1)).any()):
            raise RejectedInputError(f"{name} field has values outside [0, 1]")
    return (u + i) / 2


def validate_annotation_set(annotations: AnnotationSet) -> ValidationReport:
    """Check count, shape agreement and binarity; never raises."""
    report = ValidationReport(annotations.sample_id)
    count = len(annotations)
    if count < MIN_ANNOTATIONS:
        report.violations.append(f"count {count} < {MIN_ANNOTATIONS}")
    elif count > MAX_ANNOTATIONS:
        report.violations.append(f"count {count} > {MAX_ANNOTATIONS}")

    shapes = {np.shape(m) for m in annotations.masks}
    if len(shapes) > 1:
        report.violations.append(f"shape mismatch: {sorted(shapes)}")
    for j, mask in enumerate(annotations.masks):
        arr = np.asarray(mask)
        if arr.ndim != 2 or 0 in arr.shape:
            report.violations.append(f"mask {j}: expected non-empty 2-D grid")
            continue
        extra = np.setdiff1d(np.unique(arr), [0, 1])
        if extra.size:
            report.violations.append(
                f"mask {j}: non-binary values {extra.tolist()[:5]}"
            )
    return report
