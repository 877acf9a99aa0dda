"""Sample ingestion: manifests, HU normalisation, resizing, synthetic nodules and folds."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field, ValidationError, model_validator
from scipy import ndimage
from torch.utils.data import Dataset

from . import maskops
from .errors import DataLoadError, RejectedInputError
from .maskops import MAX_ANNOTATIONS, MIN_ANNOTATIONS, AnnotationSet, Mask

HU_MIN = -1000.0
HU_MAX = 1000.0
NATIVE_SIZE = 50
NET_SIZE = 64

_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass
class NoduleSample:
    """One CT patch in Hounsfield units with its annotation set."""

    sample_id: str
    hu_patch: npt.NDArray[np.int16]
    annotations: AnnotationSet
    fold: Optional[int] = None

    def __post_init__(self) -> None:
        if self.hu_patch.ndim != 2:
            raise RejectedInputError(f"{self.sample_id}: HU patch must be 2-D")
        for j, mask in enumerate(self.annotations.masks):
            if mask.shape != self.hu_patch.shape:
                raise RejectedInputError(
                    f"{self.sample_id}: mask {j} shape {mask.shape} does not match "
                    f"image shape {self.hu_patch.shape}"
                )


@dataclass
class NetInput:
    """A sample resized to network resolution."""

    sample_id: str
    image: npt.NDArray[np.float32]  # 3 x S x S, replicated grayscale in [0, 1]
    union: Mask
    intersection: Mask
    annotations: List[Mask]
    hu: npt.NDArray[np.float64]  # S x S, resized HU for region statistics


@dataclass
class FoldSplit:
    """Assignment of every sample id to one of `k` folds."""

    k: int
    assignments: Dict[str, int] = field(default_factory=dict)

    def test_ids(self, fold: int) -> List[str]:
        self._check(fold)
        return [sid for sid, f in self.assignments.items() if f == fold]

    def train_ids(self, fold: int) -> List[str]:
        self._check(fold)
        return [sid for sid, f in self.assignments.items() if f != fold]

    def sizes(self) -> List[int]:
        return [len(self.test_ids(f)) for f in range(self.k)]

    def _check(self, fold: int) -> None:
        if not 0 <= fold < self.k:
            raise RejectedInputError(f"fold {fold} outside [0, {self.k})")


def normalize_hu(patch: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """Clip to [-1000, 1000] HU and map linearly onto [0, 1]."""
    arr = np.asarray(patch, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise RejectedInputError("HU patch contains non-finite values")
    return (np.clip(arr, HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)


def _resize(grid: npt.ArrayLike, size: int, mode: str) -> npt.NDArray[np.float64]:
    t = torch.as_tensor(np.asarray(grid, dtype=np.float64))[None, None]
    if mode == "bilinear":
        out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    else:
        # half-pixel centred like the bilinear image resize
        out = F.interpolate(t, size=(size, size), mode="nearest-exact")
    return out[0, 0].numpy()


def to_net_input(sample: NoduleSample, size: int = NET_SIZE) -> NetInput:
    """
    Resize a sample to `size` x `size`.

    The image is resized bilinearly and replicated to three channels; masks use
    nearest-neighbour so they stay binary, and union/intersection are derived
    from the resized masks.
    """
    image = _resize(normalize_hu(sample.hu_patch), size, "bilinear")
    image3 = np.repeat(image[None], 3, axis=0).astype(np.float32)
    masks = [
        (_resize(m != 0, size, "nearest") > 0.5).astype(np.uint8)
        for m in sample.annotations.masks
    ]
    resized = AnnotationSet(tuple(masks), sample.sample_id)
    return NetInput(
        sample_id=sample.sample_id,
        image=image3,
        union=maskops.union(resized),
        intersection=maskops.intersection(resized),
        annotations=masks,
        hu=_resize(sample.hu_patch, size, "bilinear"),
    )


class NoduleDataset(Dataset[Dict[str, Any]]):
    """Torch view over NetInputs; annotation stacks are zero-padded to four."""

    def __init__(self, samples: Sequence[NoduleSample], size: int = NET_SIZE):
        for s in samples:
            if len(s.annotations) > MAX_ANNOTATIONS:
                raise RejectedInputError(
                    f"{s.sample_id}: {len(s.annotations)} annotations, at most {MAX_ANNOTATIONS}"
                )
        self.inputs = [to_net_input(s, size) for s in samples]

    def __len__(self) -> int:
        return len(self.inputs)

    def __getitem__(self, index: int) -> Dict[str, Any]:
        item = self.inputs[index]
        size = item.union.shape
        stack = np.zeros((MAX_ANNOTATIONS, *size), dtype=np.float32)
        valid = np.zeros(MAX_ANNOTATIONS, dtype=bool)
        for j, mask in enumerate(item.annotations):
            stack[j] = mask
            valid[j] = True
        return {
            "sample_id": item.sample_id,
            "image": torch.from_numpy(item.image),
            "union": torch.from_numpy(item.union[None].astype(np.float32)),
            "intersection": torch.from_numpy(item.intersection[None].astype(np.float32)),
            "annotations": torch.from_numpy(stack),
            "annotation_valid": torch.from_numpy(valid),
        }


# Synthetic multi-annotator nodules


def _ellipse(size: int, rng: np.random.Generator) -> npt.NDArray[np.bool_]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(size / 2 - 5, size / 2 + 5, size=2)
    ry, rx = rng.uniform(4, 15, size=2)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _morph(mask: npt.NDArray[np.bool_], offset: int) -> npt.NDArray[np.bool_]:
    if offset > 0:
        return np.asarray(ndimage.binary_dilation(mask, _CROSS, iterations=offset))
    if offset < 0:
        eroded = np.asarray(ndimage.binary_erosion(mask, _CROSS, iterations=-offset))
        return eroded if eroded.any() else mask
    return mask


def _jitter(
    mask: npt.NDArray[np.bool_], rng: np.random.Generator, rate: float
) -> npt.NDArray[np.bool_]:
    inner = mask & ~ndimage.binary_erosion(mask, _CROSS)
    outer = ndimage.binary_dilation(mask, _CROSS) & ~mask
    out = mask.copy()
    out[inner & (rng.random(mask.shape) < rate)] = False
    out[outer & (rng.random(mask.shape) < rate)] = True
    return out if out.any() else mask


def _synth_one(index: int, annotators: int, size: int, rng: np.random.Generator) -> NoduleSample:
    base = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        base |= _ellipse(size, rng)

    hu = rng.normal(-850.0, 50.0, size=(size, size))
    core = rng.normal(0.0, 100.0, size=(size, size))
    inside = ndimage.distance_transform_edt(base)
    rim = float(rng.uniform(2, 4))
    ramp = np.clip(inside / rim, 0.0, 1.0)
    hu = np.where(base, ramp * core + (1.0 - ramp) * hu, hu)

    if rng.random() < 0.5:
        outside = ndimage.distance_transform_edt(~base)
        width = int(rng.integers(1, 4))
        ggo = (outside > 0) & (outside <= width)
        hu = np.where(ggo, rng.normal(-600.0, 50.0, size=(size, size)), hu)

    masks = []
    for _ in range(annotators):
        offset = int(rng.choice([-1, 0, 0, 1, 1, 2]))
        masks.append(_jitter(_morph(base, offset), rng, rate=0.2).astype(np.uint8))
    if not maskops.lc_mask(AnnotationSet(tuple(masks))).any():
        masks[-1] = _morph(masks[-1] != 0, 1).astype(np.uint8)

    patch = np.clip(np.rint(hu), -1024, 3071).astype(np.int16)
    sid = f"synth-{index:05d}"
    return NoduleSample(sid, patch, AnnotationSet(tuple(masks), sid))


def synth_generate(
    count: int, annotators: int, seed: int, size: int = NATIVE_SIZE
) -> List[NoduleSample]:
    """
    Generate `count` nodules, each annotated by `annotators` simulated readers.

    A solid core (~0 HU) fades into lung background (~-850 HU) over a 2-4 px rim,
    sometimes wrapped in a ground-glass ring (~-600 HU). Readers dilate or erode
    the true outline by up to 2 px and jitter its boundary independently; if
    they happen to agree exactly, the last reader is dilated by 1 px so every
    sample has a non-empty low-confidence region.
    """
    if count < 1:
        raise RejectedInputError(f"count must be >= 1, got {count}")
    if not MIN_ANNOTATIONS <= annotators <= MAX_ANNOTATIONS:
        raise RejectedInputError(
            f"annotators must be in [{MIN_ANNOTATIONS}, {MAX_ANNOTATIONS}], "
            f"got {annotators}"
        )
    rng = np.random.default_rng(seed)
    return [_synth_one(i, annotators, size, rng) for i in range(count)]


def split_folds(ids: Sequence[str], k: int, seed: int) -> FoldSplit:
    """Seeded shuffle of the sorted ids, then round-robin fold assignment."""
    if k < 2:
        raise RejectedInputError(f"k must be >= 2, got {k}")
    unique = sorted(set(ids))
    if len(unique) != len(ids):
        raise RejectedInputError("sample ids are not unique")
    if len(unique) < k:
        raise RejectedInputError(f"{len(unique)} samples cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(unique))
    return FoldSplit(k=k, assignments={unique[j]: pos % k for pos, j in enumerate(order)})


# Manifest format


class ManifestEntry(BaseModel):
    id: str
    height: int = Field(ge=1)
    width: int = Field(ge=1)
    image: str
    masks: List[str]
    fold: Optional[int] = None

    @model_validator(mode="after")
    def _check_mask_count(self) -> "ManifestEntry":
        count = len(self.masks)
        if count < MIN_ANNOTATIONS:
            raise ValueError(f"{self.id}: count {count} < {MIN_ANNOTATIONS}")
        if count > MAX_ANNOTATIONS:
            raise ValueError(f"{self.id}: count {count} > {MAX_ANNOTATIONS}")
        return self


class Manifest(BaseModel):
    samples: List[ManifestEntry]


def _read_raw(path: Path, sample_id: str, dtype: str, shape: Tuple[int, int]) -> npt.NDArray[Any]:
    if not path.is_file():
        raise DataLoadError(f"{sample_id}: missing file {path}")
    data = path.read_bytes()
    expected = shape[0] * shape[1] * np.dtype(dtype).itemsize
    if len(data) != expected:
        raise DataLoadError(
            f"{sample_id}: {path} has {len(data)} bytes, expected {expected} "
            f"for {shape[0]}x{shape[1]}"
        )
    return np.frombuffer(data, dtype=dtype).reshape(shape)


def load_manifest(path: Union[str, Path]) -> List[NoduleSample]:
    """Load samples described by a manifest.json and its raw files."""
    manifest_path = Path(path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.is_file():
        raise DataLoadError(f"manifest not found: {manifest_path}")
    try:
        manifest = Manifest.model_validate_json(manifest_path.read_text())
    except ValidationError as e:
        raise DataLoadError(f"{manifest_path}: invalid manifest: {e}") from e

    root = manifest_path.parent
    samples = []
    for entry in manifest.samples:
        shape = (entry.height, entry.width)
        hu = _read_raw(root / entry.image, entry.id, "<i2", shape).astype(np.int16)
        masks = []
        for rel in entry.masks:
            raw = _read_raw(root / rel, entry.id, "u1", shape)
            bad = np.setdiff1d(np.unique(raw), [0, 255])
            if bad.size:
                raise DataLoadError(
                    f"{entry.id}: non-binary mask bytes {bad.tolist()[:5]} in {root / rel}"
                )
            masks.append((raw == 255).astype(np.uint8))
        samples.append(
            NoduleSample(entry.id, hu, AnnotationSet(tuple(masks), entry.id), entry.fold)
        )
    return samples


def save_manifest(samples: Sequence[NoduleSample], path: Union[str, Path]) -> Path:
    """Write raw image/mask files next to a manifest.json; returns the manifest path."""
    manifest_path = Path(path)
    if manifest_path.suffix != ".json":
        manifest_path = manifest_path / "manifest.json"
    root = manifest_path.parent
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    entries = []
    for s in samples:
        h, w = s.hu_patch.shape
        image_rel = f"images/{s.sample_id}.raw"
        (root / image_rel).write_bytes(s.hu_patch.astype("<i2").tobytes())
        mask_rels = []
        for j, mask in enumerate(s.annotations.masks):
            rel = f"masks/{s.sample_id}_{j}.raw"
            (root / rel).write_bytes(((mask != 0) * 255).astype(np.uint8).tobytes())
            mask_rels.append(rel)
        entries.append(
            ManifestEntry(id=s.sample_id, height=h, width=w, image=image_rel,
                          masks=mask_rels, fold=s.fold)
        )
    manifest_path.write_text(Manifest(samples=entries).model_dump_json(indent=2) + "\n")
    return manifest_path
