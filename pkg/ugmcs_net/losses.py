"""Binary cross-entropy, MCM loss, annotation fusion loss and the weighted objective."""

import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Tuple

import torch

from .config import LossConfig, LossWeights
from .errors import NumericFaultError, RejectedInputError
from .model import ForwardOutputs

EPS = 1e-7


@dataclass(frozen=True)
class LossBreakdown:
    l_mcm: float
    phi_a: float
    phi_b: float
    total: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _per_sample_bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixel-mean BCE of each sample along the leading dimension."""
    p = pred.clamp(EPS, 1.0 - EPS)
    t = target.to(p.dtype)
    loss = -(t * torch.log(p) + (1.0 - t) * torch.log1p(-p))
    return loss.flatten(1).mean(dim=1)


def bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of -[t log p + (1-t) log(1-p)], with p clamped to [eps, 1-eps]."""
    if pred.shape != target.shape:
        raise RejectedInputError(f"bce shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    p = pred.clamp(EPS, 1.0 - EPS)
    t = target.to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log1p(-p)).mean()


def mcm_loss(
    union_pred: torch.Tensor,
    inter_pred: torch.Tensor,
    union_gt: torch.Tensor,
    inter_gt: torch.Tensor,
) -> torch.Tensor:
    return bce(union_pred, union_gt) + bce(inter_pred, inter_gt)


def fusion_loss(
    pred: torch.Tensor,
    annotations: torch.Tensor,
    valid: Optional[torch.Tensor] = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """
    BCE of `pred` against every annotation of its set, reduced over annotators.

    pred is N x 1 x H x W, annotations N x J x H x W and valid an N x J mask of
    real (unpadded) annotations. Annotators are averaged (or summed) per sample
    and samples are averaged.
    """
    if annotations.dim() != 4 or pred.shape[0] != annotations.shape[0]:
        raise RejectedInputError(
            f"expected N x J x H x W annotations for batch {pred.shape[0]}, "
            f"got {tuple(annotations.shape)}"
        )
    if pred.shape[1:] != (1, *annotations.shape[2:]):
        raise RejectedInputError(
            f"prediction shape {tuple(pred.shape)} does not match masks {tuple(annotations.shape)}"
        )
    n, j = annotations.shape[:2]
    if valid is None:
        valid = torch.ones(n, j, dtype=torch.bool, device=annotations.device)
    counts = valid.sum(dim=1)
    if j == 0 or bool((counts == 0).any()):
        raise RejectedInputError("fusion loss needs a non-empty annotation set per sample")

    expanded = pred.expand(-1, j, -1, -1).reshape(n * j, -1)
    per_pair = _per_sample_bce(expanded, annotations.reshape(n * j, -1)).reshape(n, j)
    summed = (per_pair * valid.to(per_pair.dtype)).sum(dim=1)
    if reduction == "sum":
        return summed.mean()
    if reduction == "mean":
        return (summed / counts.to(per_pair.dtype)).mean()
    raise ValueError(f"Unsupported fusion reduction: {reduction}. Supported: mean, sum")


def total_loss(l_mcm: float, phi_a: float, phi_b: float, weights: LossWeights) -> LossBreakdown:
    """alpha1 * L_MCM + alpha2 * Phi_a + alpha3 * Phi_b."""
    for name, value in (("l_mcm", l_mcm), ("phi_a", phi_a), ("phi_b", phi_b)):
        if not math.isfinite(value):
            raise NumericFaultError(f"loss component {name} is not finite ({value})")
    total = weights.alpha1 * l_mcm + weights.alpha2 * phi_a + weights.alpha3 * phi_b
    return LossBreakdown(l_mcm=l_mcm, phi_a=phi_a, phi_b=phi_b, total=total)


def _single_label(batch: Dict[str, Any], index: int) -> torch.Tensor:
    """The annotation at `index`, falling back to the first one where it is padding."""
    annotations: torch.Tensor = batch["annotations"]
    valid: torch.Tensor = batch["annotation_valid"]
    chosen = annotations[:, index : index + 1]
    first = annotations[:, 0:1]
    has = valid[:, index].reshape(-1, 1, 1, 1)
    return torch.where(has, chosen, first)


def _check_head(name: str, value: torch.Tensor) -> None:
    if not bool(torch.isfinite(value).all()):
        raise NumericFaultError(f"non-finite loss from output head {name}")


def objective(
    outputs: ForwardOutputs, batch: Dict[str, Any], config: LossConfig
) -> Tuple[torch.Tensor, LossBreakdown]:
    """
    Differentiable total loss for one batch plus its float breakdown.

    Heads whose fusion target is disabled train against the single annotation
    chosen by `annotation_index`. Without the uncertainty-aware module only the
    Phi_b term on X_S remains.
    """
    annotations = batch["annotations"].to(outputs.x_s.dtype)
    valid = batch["annotation_valid"]
    targets = config.fusion_targets
    w = config.weights
    zero = outputs.x_s.new_zeros(())

    def head_loss(pred: torch.Tensor, fused: bool) -> torch.Tensor:
        if fused:
            return fusion_loss(pred, annotations, valid, config.fusion_reduction)
        return bce(pred, _single_label(batch, config.annotation_index).to(pred.dtype))

    phi_b = head_loss(outputs.x_s, targets.phi_b)
    _check_head("x_s", phi_b)
    if outputs.union_pred is None or outputs.inter_pred is None or outputs.x_uni is None:
        l_mcm, phi_a = zero, zero
    else:
        l_mcm = mcm_loss(
            outputs.union_pred,
            outputs.inter_pred,
            batch["union"].to(outputs.x_s.dtype),
            batch["intersection"].to(outputs.x_s.dtype),
        )
        _check_head("union/intersection", l_mcm)
        phi_a = head_loss(outputs.x_uni, targets.phi_a)
        _check_head("x_uni", phi_a)

    total = w.alpha1 * l_mcm + w.alpha2 * phi_a + w.alpha3 * phi_b
    breakdown = total_loss(float(l_mcm.detach()), float(phi_a.detach()), float(phi_b.detach()), w)
    return total, breakdown
