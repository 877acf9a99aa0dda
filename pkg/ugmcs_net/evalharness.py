"""Cross-validation, model comparison, HU-distribution and complex-nodule harnesses."""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import click
import numpy as np
import numpy.typing as npt
import pandas as pd

from . import maskops, metrics
from .config import RunConfig, config_echo, save_results
from .dataio import FoldSplit, NoduleDataset, NoduleSample, split_folds
from .errors import DegenerateInputError, RejectedInputError, UgmcsError
from .metrics import KdeCurve, MetricsRecord, PairedTestResult
from .model import UGMCSNet, load_checkpoint, predict
from .trainer import evaluate_model, fit, fold_datasets, stack_images

METRICS = ("dsc", "iou", "nsd")
COMPARED_METRICS = ("dsc", "iou")
DEFAULT_THRESHOLDS = (60, 70, 80)
HU_REGIONS = ("lc_gt", "hc_gt", "lc_pred", "hc_pred")


def _nan_to_none(value: Optional[float]) -> Optional[float]:
    return None if value is None or math.isnan(value) else float(value)


@dataclass
class FoldSummary:
    """Mean and population std of each metric over one fold."""

    fold: int
    n: int
    dsc_mean: float
    dsc_std: float
    iou_mean: float
    iou_std: float
    nsd_mean: float
    nsd_std: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RunReport:
    """Per-sample scores with their fold, plus the config that produced them."""

    records: List[MetricsRecord]
    folds: Dict[str, int]
    seed: int
    config: Dict[str, Any] = field(default_factory=dict)

    def frame(self) -> pd.DataFrame:
        rows = [{**r.to_dict(), "fold": self.folds[r.sample_id]} for r in self.records]
        return pd.DataFrame(rows, columns=["sample_id", "fold", *METRICS])

    def per_fold(self) -> List[FoldSummary]:
        summaries = []
        for fold, group in self.frame().groupby("fold", sort=True):
            values = {}
            for m in METRICS:
                values[f"{m}_mean"] = float(group[m].mean())
                values[f"{m}_std"] = float(group[m].std(ddof=0))
            summaries.append(FoldSummary(fold=int(fold), n=len(group), **values))
        return summaries

    def overall(self) -> Dict[str, float]:
        frame = self.frame()
        out: Dict[str, float] = {"n": float(len(frame))}
        for m in METRICS:
            out[f"{m}_mean"] = float(frame[m].mean())
            out[f"{m}_std"] = float(frame[m].std(ddof=0))
        return out

    def scores(self, metric: str) -> Dict[str, float]:
        return {r.sample_id: float(getattr(r, metric)) for r in self.records}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "config": self.config,
            "per_fold": [s.to_dict() for s in self.per_fold()],
            "overall": self.overall(),
            "per_sample": [
                {**r.to_dict(), "fold": self.folds[r.sample_id]}
                for r in sorted(self.records, key=lambda r: r.sample_id)
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunReport":
        try:
            rows = data["per_sample"]
            records = [
                MetricsRecord(
                    str(row["sample_id"]), float(row["dsc"]), float(row["iou"]), float(row["nsd"])
                )
                for row in rows
            ]
            folds = {str(row["sample_id"]): int(row.get("fold", 0)) for row in rows}
        except (KeyError, TypeError, ValueError) as e:
            raise RejectedInputError(f"malformed report: {e}") from e
        if len(folds) != len(records):
            raise RejectedInputError("report lists a sample id more than once")
        return cls(records, folds, int(data.get("seed", 0)), dict(data.get("config", {})))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunReport":
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise RejectedInputError(f"{path}: not a JSON report: {e}") from e

    def save(self, path: Union[str, Path]) -> None:
        save_results(self.to_dict(), path)


def _report_config(config: RunConfig) -> Dict[str, Any]:
    # out_dir only says where the report lives
    echo = config_echo(config)
    echo.pop("out_dir", None)
    return echo


# Evaluation and cross-validation


def evaluate(
    checkpoint: Union[str, Path, UGMCSNet],
    samples: Sequence[NoduleSample],
    split: FoldSplit,
    fold: int,
    config: RunConfig,
) -> List[MetricsRecord]:
    """Score a trained model on the held-out samples of `fold`."""
    if isinstance(checkpoint, UGMCSNet):
        model = checkpoint
    else:
        model = load_checkpoint(checkpoint, expected=config.net)
    _, test_set = fold_datasets(samples, split, fold, config.net.input_size)
    return evaluate_model(model, test_set, config.eval, config.train.batch_size)


def crossval(
    samples: Sequence[NoduleSample],
    config: RunConfig,
    out_dir: Path,
    verbose: bool = False,
) -> RunReport:
    """Train one model per fold and score each on its held-out fold."""
    split = split_folds([s.sample_id for s in samples], config.folds, config.seed)
    records: List[MetricsRecord] = []
    for fold in range(split.k):
        if verbose:
            click.echo(f"Cross-validation fold {fold + 1}/{split.k}")
        result = fit(samples, split, fold, config, out_dir, verbose=verbose)
        records.extend(evaluate(result.model, samples, split, fold, config))
    report = RunReport(records, dict(split.assignments), config.seed, _report_config(config))
    if verbose:
        overall = report.overall()
        click.echo(
            f"Average: DSC {overall['dsc_mean']:.4f}  IoU {overall['iou_mean']:.4f}  "
            f"NSD {overall['nsd_mean']:.4f}"
        )
    return report


def single_fold_report(
    records: Sequence[MetricsRecord], fold: int, config: RunConfig
) -> RunReport:
    folds = {r.sample_id: fold for r in records}
    return RunReport(list(records), folds, config.seed, _report_config(config))


# Model comparison


def _aligned(a: RunReport, b: RunReport, metric: str) -> Tuple[List[float], List[float]]:
    sa, sb = a.scores(metric), b.scores(metric)
    if set(sa) != set(sb):
        only_a = sorted(set(sa) - set(sb))[:5]
        only_b = sorted(set(sb) - set(sa))[:5]
        raise RejectedInputError(
            f"reports cover different samples (only in first: {only_a}, only in second: {only_b})"
        )
    ids = sorted(sa)
    return [sa[i] for i in ids], [sb[i] for i in ids]


def compare_models(report_a: RunReport, report_b: RunReport) -> Dict[str, PairedTestResult]:
    """Paired t-test of per-sample DSC and IoU (first minus second)."""
    results = {}
    for metric in COMPARED_METRICS:
        a, b = _aligned(report_a, report_b, metric)
        results[metric] = metrics.paired_t_test(a, b)
    return results


# HU-distribution check


@dataclass
class HuAnalysis:
    """Pooled HU statistics of true and predicted LC/HC regions."""

    curves: Dict[str, Optional[KdeCurve]]
    mean_hu: Dict[str, Optional[float]]
    counts: Dict[str, int]
    absent: Dict[str, str] = field(default_factory=dict)
    containment: Optional[float] = None
    oracle: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "oracle": self.oracle,
            "mean_hu": self.mean_hu,
            "counts": self.counts,
            "absent": self.absent,
            "containment": self.containment,
            "bandwidth": {k: (c.bandwidth if c else None) for k, c in self.curves.items()},
        }

    def write_curves(self, directory: Path) -> List[Path]:
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for name, curve in self.curves.items():
            if curve is not None:
                path = directory / f"kde_{name}.csv"
                curve.to_csv(path)
                written.append(path)
        return written


def hu_distribution_check(
    samples: Sequence[NoduleSample],
    model: Optional[UGMCSNet] = None,
    size: int = 64,
    grid_points: int = 512,
    batch_size: int = 32,
) -> HuAnalysis:
    """
    Compare HU distributions of true and predicted LC/HC regions.

    Without a model the ground truth stands in for the predictions (oracle
    mode). Predicted HC is the intersection head at >= 0.5; predicted LC is
    the binarized union head minus predicted HC.
    """
    if not samples:
        raise RejectedInputError("hu_distribution_check needs at least one sample")
    dataset = NoduleDataset(samples, size)
    maps: Optional[Dict[str, npt.NDArray[np.float64]]] = None
    if model is not None:
        maps = predict(model, stack_images(dataset), batch_size)
        if "union" not in maps:
            raise RejectedInputError("model has no union/intersection heads (use_uam is off)")

    pools: Dict[str, List[npt.NDArray[np.float64]]] = {name: [] for name in HU_REGIONS}
    contained: List[float] = []
    for idx, item in enumerate(dataset.inputs):
        gt_u = item.union != 0
        gt_i = item.intersection != 0
        if maps is None:
            pu, pi = gt_u, gt_i
        else:
            pu = maps["union"][idx] >= 0.5
            pi = maps["intersection"][idx] >= 0.5
            seg = maps["x_s"][idx] >= 0.5
            contained.append(metrics.containment_rate(seg, pu, pi))
        pools["lc_gt"].append(item.hu[gt_u & ~gt_i])
        pools["hc_gt"].append(item.hu[gt_i])
        pools["lc_pred"].append(item.hu[pu & ~pi])
        pools["hc_pred"].append(item.hu[pi])

    curves: Dict[str, Optional[KdeCurve]] = {}
    mean_hu: Dict[str, Optional[float]] = {}
    counts: Dict[str, int] = {}
    absent: Dict[str, str] = {}
    for name in HU_REGIONS:
        values = np.concatenate(pools[name])
        counts[name] = int(values.size)
        mean_hu[name] = float(values.mean()) if values.size else None
        try:
            curves[name] = metrics.kde(values, grid_points)
        except DegenerateInputError as e:
            curves[name] = None
            absent[name] = "empty region" if values.size == 0 else str(e)

    return HuAnalysis(
        curves=curves,
        mean_hu=mean_hu,
        counts=counts,
        absent=absent,
        containment=float(np.mean(contained)) if contained else None,
        oracle=model is None,
    )


def plot_hu_curves(analysis: HuAnalysis, path: Path) -> None:
    """Render the four KDE curves to an image file."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as e:
        raise UgmcsError("plotting needs matplotlib: pip install 'ugmcs-net[plot]'") from e

    fig, ax = plt.subplots(figsize=(7, 4))
    styles = {"lc_gt": "C0-", "hc_gt": "C1-", "lc_pred": "C0--", "hc_pred": "C1--"}
    for name, curve in analysis.curves.items():
        if curve is not None:
            ax.plot(curve.grid, curve.density, styles[name], label=name)
    ax.set_xlabel("HU")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# Complex-nodule validation


@dataclass
class BucketReport:
    """Candidate vs baseline on the samples the baseline segments poorly."""

    threshold: float
    candidate: str
    selected_ids: List[str]
    baseline_dsc: float
    baseline_iou: float
    candidate_dsc: float
    candidate_iou: float
    lower: Optional[float] = None
    per_fold: Dict[int, Dict[str, float]] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.selected_ids)

    @property
    def delta_dsc(self) -> float:
        return self.candidate_dsc - self.baseline_dsc

    @property
    def delta_iou(self) -> float:
        return self.candidate_iou - self.baseline_iou

    def to_dict(self) -> Dict[str, Any]:
        return {
            "threshold": self.threshold,
            "lower": self.lower,
            "candidate": self.candidate,
            "count": self.count,
            "selected_ids": self.selected_ids,
            "baseline_dsc": _nan_to_none(self.baseline_dsc),
            "baseline_iou": _nan_to_none(self.baseline_iou),
            "candidate_dsc": _nan_to_none(self.candidate_dsc),
            "candidate_iou": _nan_to_none(self.candidate_iou),
            "delta_dsc": _nan_to_none(self.delta_dsc),
            "delta_iou": _nan_to_none(self.delta_iou),
            "per_fold": {
                str(k): {m: _nan_to_none(v) for m, v in row.items()}
                for k, row in sorted(self.per_fold.items())
            },
        }


def _bucket(
    baseline: pd.DataFrame,
    candidate: pd.DataFrame,
    name: str,
    ids: List[str],
    threshold: float,
    lower: Optional[float],
) -> BucketReport:
    b = baseline.loc[ids]
    c = candidate.loc[ids]
    per_fold: Dict[int, Dict[str, float]] = {}
    for fold, group in b.groupby("fold", sort=True):
        cg = c.loc[group.index]
        per_fold[int(fold)] = {
            "baseline_dsc": float(group["dsc"].mean()),
            "candidate_dsc": float(cg["dsc"].mean()),
            "baseline_iou": float(group["iou"].mean()),
            "candidate_iou": float(cg["iou"].mean()),
        }
    return BucketReport(
        threshold=threshold,
        candidate=name,
        selected_ids=ids,
        baseline_dsc=float(b["dsc"].mean()) if ids else math.nan,
        baseline_iou=float(b["iou"].mean()) if ids else math.nan,
        candidate_dsc=float(c["dsc"].mean()) if ids else math.nan,
        candidate_iou=float(c["iou"].mean()) if ids else math.nan,
        lower=lower,
        per_fold=per_fold,
    )


def complex_validation(
    baseline: RunReport,
    candidates: Mapping[str, RunReport],
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
    bands: bool = False,
) -> List[BucketReport]:
    """
    Bucket samples by baseline DSC <= threshold percent and compare candidates on them.

    Buckets are cumulative. With `bands`, each threshold after the first also
    yields the exclusive band (previous, threshold].
    """
    levels = sorted(float(t) for t in thresholds)
    if not levels:
        raise RejectedInputError("complex_validation needs at least one threshold")
    base = baseline.frame().set_index("sample_id")
    reports = []
    for name, report in candidates.items():
        if set(report.folds) != set(baseline.folds):
            raise RejectedInputError(f"candidate {name} covers different samples than the baseline")
        cand = report.frame().set_index("sample_id")
        previous: List[str] = []
        prev_level: Optional[float] = None
        for level in levels:
            ids = sorted(base.index[base["dsc"] <= level / 100.0])
            reports.append(_bucket(base, cand, name, ids, level, None))
            if bands and prev_level is not None:
                band_ids = sorted(set(ids) - set(previous))
                reports.append(_bucket(base, cand, name, band_ids, level, prev_level))
            previous, prev_level = ids, level
    return reports


# Prediction export and text rendering


def export_predictions(
    model: UGMCSNet, samples: Sequence[NoduleSample], path: Path, batch_size: int = 32
) -> Path:
    """Write union, intersection, X_S and MCM' maps of every sample to one .npz."""
    dataset = NoduleDataset(samples, model.config.input_size)
    maps = predict(model, stack_images(dataset), batch_size)
    ids = np.array([item.sample_id for item in dataset.inputs])
    np.savez_compressed(path, sample_ids=ids, **{k: v.astype(np.float32) for k, v in maps.items()})
    return path


def _pct(mean: float, std: float) -> str:
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def render_run_report(report: RunReport) -> str:
    """Fold table: one row per metric, one column per fold plus the average."""
    summaries = report.per_fold()
    overall = report.overall()
    table = {}
    for s in summaries:
        table[f"Fold{s.fold + 1}"] = [
            _pct(getattr(s, f"{m}_mean"), getattr(s, f"{m}_std")) for m in METRICS
        ]
    table["Average"] = [_pct(overall[f"{m}_mean"], overall[f"{m}_std"]) for m in METRICS]
    frame = pd.DataFrame(table, index=["DSC (%)", "IoU (%)", "NSD (%)"])
    return frame.to_string() + "\n"


def render_comparison(results: Mapping[str, PairedTestResult]) -> str:
    frame = pd.DataFrame(
        [
            {"metric": m.upper(), "t": r.t_value, "p": r.p_value, "n": r.n}
            for m, r in results.items()
        ]
    )
    return frame.to_string(index=False, float_format=lambda v: f"{v:.6g}") + "\n"


def render_buckets(buckets: Sequence[BucketReport]) -> str:
    blocks = []
    for b in buckets:
        label = (
            f"{b.lower:g}% < baseline DSC <= {b.threshold:g}%"
            if b.lower is not None
            else f"baseline DSC <= {b.threshold:g}%"
        )
        rows = [
            {"model": "baseline", "DSC (%)": 100 * b.baseline_dsc, "IoU (%)": 100 * b.baseline_iou},
            {
                "model": b.candidate,
                "DSC (%)": 100 * b.candidate_dsc,
                "IoU (%)": 100 * b.candidate_iou,
            },
            {"model": "delta", "DSC (%)": 100 * b.delta_dsc, "IoU (%)": 100 * b.delta_iou},
        ]
        table = pd.DataFrame(rows).to_string(
            index=False, float_format=lambda v: f"{v:.2f}", na_rep="n/a"
        )
        blocks.append(f"{label}  (n = {b.count})\n{table}\n")
    return "\n".join(blocks)


def render_hu(analysis: HuAnalysis) -> str:
    rows = []
    for name in HU_REGIONS:
        curve = analysis.curves[name]
        rows.append(
            {
                "region": name,
                "pixels": analysis.counts[name],
                "mean HU": analysis.mean_hu[name],
                "mode HU": curve.mode() if curve is not None else None,
            }
        )
    text = pd.DataFrame(rows).to_string(
        index=False, float_format=lambda v: f"{v:.1f}", na_rep="absent"
    )
    if analysis.containment is not None:
        text += f"\ncontainment (intersection <= X_S <= union): {100 * analysis.containment:.2f}%"
    return text + "\n"


def check_annotation_sets(samples: Sequence[NoduleSample]) -> List[maskops.ValidationReport]:
    """Validation reports for every sample that violates the annotation-set contract."""
    return [
        report
        for report in (maskops.validate_annotation_set(s.annotations) for s in samples)
        if not report.ok
    ]
