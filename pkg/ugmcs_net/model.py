"""UGMCS-Net: feature extractor, uncertainty-aware branches and intersection-union constraining."""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt
import torch
import torch.nn.functional as F
from torch import nn

from .config import NetConfig, config_echo
from .errors import NumericFaultError, RejectedInputError
from .filters import FeatureFilter, create_filter
from .maskops import compose_mcm

CHECKPOINT_FORMAT_VERSION = 1
BRANCHES = ("uni", "lc", "hc")


@dataclass
class ForwardOutputs:
    """Every head and intermediate map of one forward pass, batch first."""

    r: torch.Tensor
    x_s: torch.Tensor
    x_s_logits: torch.Tensor
    r_lc: Optional[torch.Tensor] = None
    r_hc: Optional[torch.Tensor] = None
    r_uni: Optional[torch.Tensor] = None
    union_pred: Optional[torch.Tensor] = None
    inter_pred: Optional[torch.Tensor] = None
    x_uni: Optional[torch.Tensor] = None
    mcm: Optional[torch.Tensor] = None
    r_prime: Optional[Dict[str, torch.Tensor]] = None
    similarities: Optional[Dict[str, torch.Tensor]] = None

    def heads(self) -> Dict[str, torch.Tensor]:
        """Probability maps present in this output, keyed by head name."""
        named = {
            "union": self.union_pred,
            "intersection": self.inter_pred,
            "x_uni": self.x_uni,
            "x_s": self.x_s,
        }
        return {k: v for k, v in named.items() if v is not None}


class ConvBlock(nn.Module):
    """Two 3x3 convolutions, each followed by instance-style normalisation and ReLU."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
            nn.InstanceNorm2d(out_channels, affine=True, track_running_stats=False),
            nn.ReLU(),
            nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1),
            nn.InstanceNorm2d(out_channels, affine=True, track_running_stats=False),
            nn.ReLU(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class AttentionGate(nn.Module):
    """Additive attention gate on a skip connection, gated by the decoder feature."""

    def __init__(self, gating_channels: int, skip_channels: int, inter_channels: int):
        super().__init__()
        self.w_g = nn.Conv2d(gating_channels, inter_channels, kernel_size=1)
        self.w_x = nn.Conv2d(skip_channels, inter_channels, kernel_size=1)
        self.psi = nn.Conv2d(inter_channels, 1, kernel_size=1)

    def forward(self, g: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        alpha = torch.sigmoid(self.psi(F.relu(self.w_g(g) + self.w_x(skip))))
        return skip * alpha


class FeatureExtractor(nn.Module):
    """Attention-gated U-Net producing the shared feature map R."""

    def __init__(self, config: NetConfig, in_channels: int = 3):
        super().__init__()
        widths = [config.base_channels * 2**level for level in range(config.depth)]
        self.encoders = nn.ModuleList()
        prev = in_channels
        for width in widths:
            self.encoders.append(ConvBlock(prev, width))
            prev = width
        self.pool = nn.MaxPool2d(kernel_size=2)
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)

        self.gates = nn.ModuleList()
        self.decoders = nn.ModuleList()
        # decoder level l merges level l+1 (upsampled) with the level-l skip
        for level in range(config.depth - 1):
            deep, skip = widths[level + 1], widths[level]
            if config.attention_gates:
                self.gates.append(AttentionGate(deep, skip, max(skip // 2, 1)))
            self.decoders.append(ConvBlock(deep + skip, skip))
        self.head = nn.Conv2d(widths[0], config.feature_channels, kernel_size=1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        skips: List[torch.Tensor] = []
        x = image
        last = len(self.encoders) - 1
        for level, encoder in enumerate(self.encoders):
            x = encoder(x)
            if level < last:
                skips.append(x)
                x = self.pool(x)
        for level in reversed(range(last)):
            x = self.up(x)
            skip = skips[level]
            if len(self.gates):
                skip = self.gates[level](x, skip)
            x = self.decoders[level](torch.cat([x, skip], dim=1))
        return self.head(x)


class PredictionHead(nn.Module):
    """3x3 conv + ReLU + 3x3 conv to a single logit map."""

    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, 1, kernel_size=3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class UncertaintyAwareModule(nn.Module):
    """
    Splits R into LC, HC and annotation-set branches.

    R_LC predicts the union, R_HC the intersection and R_Uni a plausible
    single segmentation X_Uni.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.branch_lc = nn.Conv2d(channels, channels, kernel_size=1)
        self.branch_hc = nn.Conv2d(channels, channels, kernel_size=1)
        self.branch_uni = nn.Conv2d(channels, channels, kernel_size=1)
        self.head_union = PredictionHead(channels)
        self.head_inter = PredictionHead(channels)
        self.head_uni = PredictionHead(channels)

    def forward(self, r: torch.Tensor) -> Dict[str, torch.Tensor]:
        r_lc = self.branch_lc(r)
        r_hc = self.branch_hc(r)
        r_uni = self.branch_uni(r)
        return {
            "r_lc": r_lc,
            "r_hc": r_hc,
            "r_uni": r_uni,
            "union_pred": torch.sigmoid(self.head_union(r_lc)),
            "inter_pred": torch.sigmoid(self.head_inter(r_hc)),
            "x_uni": torch.sigmoid(self.head_uni(r_uni)),
        }


class SpatialSelfAttention(nn.Module):
    """Single-head self-attention over all H*W positions."""

    def __init__(self, channels: int, attention_channels: int):
        super().__init__()
        self.query = nn.Conv2d(channels, attention_channels, kernel_size=1)
        self.key = nn.Conv2d(channels, attention_channels, kernel_size=1)
        self.value = nn.Conv2d(channels, channels, kernel_size=1)
        self.scale = 1.0 / math.sqrt(attention_channels)

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        """Row-normalised attention weights, N x HW x HW."""
        q = self.query(x).flatten(2)
        k = self.key(x).flatten(2)
        return torch.softmax(torch.bmm(q.transpose(1, 2), k) * self.scale, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        v = self.value(x).flatten(2)
        out = torch.bmm(v, self.weights(x).transpose(1, 2))
        return out.reshape(n, c, h, w)


class FeatureAwareAttentionBlock(nn.Module):
    """R'_z = R_z + Gamma(A(R_z))."""

    def __init__(self, channels: int, attention_channels: int, feature_filter: FeatureFilter):
        super().__init__()
        self.attention = SpatialSelfAttention(channels, attention_channels)
        self.filter = feature_filter

    def forward(self, r_z: torch.Tensor) -> torch.Tensor:
        return r_z + self.filter(self.attention(r_z))


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-sample cosine similarity of flattened tensors; 0 when either norm is 0."""
    fa, fb = a.flatten(1), b.flatten(1)
    dot = (fa * fb).sum(dim=1)
    denom_sq = (fa * fa).sum(dim=1) * (fb * fb).sum(dim=1)
    positive = denom_sq > 0
    safe = torch.where(positive, denom_sq, torch.ones_like(denom_sq))
    sim = torch.where(positive, dot * torch.rsqrt(safe), torch.zeros_like(dot))
    return sim.clamp(-1.0, 1.0)


class IntersectionUnionConstrainingModule(nn.Module):
    """Filters each branch through its FAAB, weights it by similarity to R and fuses."""

    def __init__(self, config: NetConfig):
        super().__init__()
        c = config.feature_channels
        self.blocks = nn.ModuleDict(
            {
                name: FeatureAwareAttentionBlock(
                    c,
                    config.attention_channels,
                    create_filter(getattr(config.filters, name), config.gabor, config.otsu_bins),
                )
                for name in BRANCHES
            }
        )
        self.head = nn.Conv2d(4 * c, 1, kernel_size=3, padding=1)

    def forward(
        self, r: torch.Tensor, r_lc: torch.Tensor, r_hc: torch.Tensor, r_uni: torch.Tensor
    ) -> Tuple[torch.Tensor, Dict[str, torch.Tensor], Dict[str, torch.Tensor]]:
        inputs = {"uni": r_uni, "lc": r_lc, "hc": r_hc}
        primes = {name: self.blocks[name](inputs[name]) for name in BRANCHES}
        sims = {name: cosine_similarity(primes[name], r) for name in BRANCHES}
        weighted = [sims[name][:, None, None, None] * primes[name] for name in BRANCHES]
        r_aug = torch.cat(weighted, dim=1)
        r_final = torch.cat([r, r_aug], dim=1)
        return self.head(r_final), primes, sims


class UGMCSNet(nn.Module):
    """The full network; branch toggles reduce it to the ablation baselines."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        c = config.feature_channels
        self.fem = FeatureExtractor(config)
        self.uam: Optional[UncertaintyAwareModule] = None
        self.iucm: Optional[IntersectionUnionConstrainingModule] = None
        self.seg_head: Optional[PredictionHead] = None
        if config.branch_toggles.use_uam:
            self.uam = UncertaintyAwareModule(c)
        if config.branch_toggles.use_iucm:
            self.iucm = IntersectionUnionConstrainingModule(config)
        else:
            self.seg_head = PredictionHead(c)

    def forward(self, image: torch.Tensor) -> ForwardOutputs:
        r = self.fem(image)
        if self.uam is None:
            assert self.seg_head is not None
            logits = self.seg_head(r)
            return ForwardOutputs(r=r, x_s=torch.sigmoid(logits), x_s_logits=logits)

        branches = self.uam(r)
        primes: Optional[Dict[str, torch.Tensor]] = None
        sims: Optional[Dict[str, torch.Tensor]] = None
        if self.iucm is not None:
            logits, primes, sims = self.iucm(
                r, branches["r_lc"], branches["r_hc"], branches["r_uni"]
            )
        else:
            assert self.seg_head is not None
            logits = self.seg_head(r)
        return ForwardOutputs(
            r=r,
            x_s=torch.sigmoid(logits),
            x_s_logits=logits,
            r_lc=branches["r_lc"],
            r_hc=branches["r_hc"],
            r_uni=branches["r_uni"],
            union_pred=branches["union_pred"],
            inter_pred=branches["inter_pred"],
            x_uni=branches["x_uni"],
            mcm=compose_mcm(branches["union_pred"], branches["inter_pred"]),
            r_prime=primes,
            similarities=sims,
        )


def init_parameters(model: nn.Module) -> None:
    """Fan-in scaled uniform weights and zero biases for every convolution."""
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            nn.init.kaiming_uniform_(module.weight, nonlinearity="relu")
            if module.bias is not None:
                nn.init.zeros_(module.bias)


def build_model(config: NetConfig, seed: int = 0) -> UGMCSNet:
    """Construct and initialise a network deterministically from `seed`."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UGMCSNet(config)
        init_parameters(model)
    return model


def check_finite(model: nn.Module) -> None:
    for name, param in model.named_parameters():
        if not torch.isfinite(param).all():
            raise NumericFaultError(f"non-finite values in parameter {name}")


def net_forward(model: UGMCSNet, image: torch.Tensor) -> ForwardOutputs:
    """Validated forward pass: finite parameters and an N x 3 x S x S image in [0, 1]."""
    check_finite(model)
    size = model.config.input_size
    if image.dim() != 4 or tuple(image.shape[1:]) != (3, size, size):
        raise RejectedInputError(
            f"expected image of shape N x 3 x {size} x {size}, got {tuple(image.shape)}"
        )
    if bool(((image < 0) | (image > 1)).any()):
        raise RejectedInputError("image values must lie in [0, 1]")
    return model(image)


@torch.no_grad()
def predict(
    model: UGMCSNet, images: torch.Tensor, batch_size: int = 32
) -> Dict[str, npt.NDArray[np.float64]]:
    """Run inference in chunks; returns N x H x W probability maps per head plus `mcm`."""
    model.eval()
    dtype = next(model.parameters()).dtype
    chunks: Dict[str, List[npt.NDArray[np.float64]]] = {}
    for start in range(0, images.shape[0], batch_size):
        out = net_forward(model, images[start : start + batch_size].to(dtype))
        maps = out.heads()
        if out.mcm is not None:
            maps["mcm"] = out.mcm
        for name, value in maps.items():
            chunks.setdefault(name, []).append(value[:, 0].double().cpu().numpy())
    return {name: np.concatenate(parts) for name, parts in chunks.items()}


def save_checkpoint(model: UGMCSNet, path: Union[str, Path]) -> None:
    """Write config echo plus parameters keyed by layer path."""
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": config_echo(model.config),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path: Union[str, Path], expected: Optional[NetConfig] = None) -> UGMCSNet:
    """Rebuild a model from a checkpoint, rejecting version or config mismatches."""
    if not Path(path).is_file():
        raise RejectedInputError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise RejectedInputError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict):
        raise RejectedInputError(f"{path}: not a UGMCS-Net checkpoint")
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise RejectedInputError(
            f"{path}: checkpoint format {version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )
    config = NetConfig.model_validate(payload["config"])
    if expected is not None and config_echo(expected) != config_echo(config):
        raise RejectedInputError(f"{path}: checkpoint config does not match the run config")
    model = UGMCSNet(config)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        raise RejectedInputError(f"{path}: parameters do not fit the stored config: {e}") from e
    return model
