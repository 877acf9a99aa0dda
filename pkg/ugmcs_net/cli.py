"""CLI interface for UGMCS-Net training and evaluation."""

import functools
import sys
import traceback
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, TypeVar

import click

from . import __version__
from .config import VARIANTS, RunConfig, load_config, save_config_echo, save_results
from .dataio import load_manifest, save_manifest, split_folds, synth_generate
from .errors import ConfigError, RejectedInputError, UgmcsError
from .evalharness import (
    DEFAULT_THRESHOLDS,
    RunReport,
    check_annotation_sets,
    compare_models,
    complex_validation,
    crossval,
    evaluate,
    export_predictions,
    hu_distribution_check,
    plot_hu_curves,
    render_buckets,
    render_comparison,
    render_hu,
    render_run_report,
    single_fold_report,
)
from .metrics import write_metrics_csv
from .model import load_checkpoint
from .trainer import fit

F = TypeVar("F", bound=Callable[..., Any])

# I/O failures are reported as data errors
IO_EXIT_CODE = 3


def guarded(func: F) -> F:
    """Turn library exceptions into an error message and exit code."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        verbose = bool((click.get_current_context().obj or {}).get("verbose"))
        try:
            return func(*args, **kwargs)
        except (click.ClickException, click.Abort):
            raise
        except Exception as e:
            if isinstance(e, UgmcsError):
                code = e.exit_code
            elif isinstance(e, OSError):
                code = IO_EXIT_CODE
            else:
                code = 1
            click.echo(f"Error: {e}", err=True)
            if verbose:
                traceback.print_exc()
            sys.exit(code)

    return wrapper  # type: ignore[return-value]


def _echo(ctx: click.Context, message: str) -> None:
    if ctx.obj.get("verbose"):
        click.echo(message)


def _run_config(
    config: Path,
    out_dir: Optional[Path] = None,
    variant: Optional[str] = None,
    seed: Optional[int] = None,
    epochs: Optional[int] = None,
    annotation_index: Optional[int] = None,
) -> RunConfig:
    """Load the config file with command-line flags taking precedence."""
    overrides: Dict[str, Any] = {}
    if out_dir is not None:
        overrides["out_dir"] = str(out_dir)
    if variant is not None:
        overrides["variant"] = variant
    if seed is not None:
        overrides["seed"] = seed
        overrides["train"] = {"seed": seed}
    if epochs is not None:
        overrides.setdefault("train", {})["epochs"] = epochs
    if annotation_index is not None:
        overrides["eval"] = {"annotation_index": annotation_index}
    run_config = load_config(config, overrides)
    if not run_config.dataset.exists():
        raise ConfigError(f"dataset: path does not exist: {run_config.dataset}")
    return run_config


def _check_fold(fold: int, run_config: RunConfig) -> None:
    if not 0 <= fold < run_config.folds:
        raise click.BadParameter(
            f"{fold} is not a valid fold for folds={run_config.folds} "
            f"(valid: 0-{run_config.folds - 1})",
            param_hint="'--fold'",
        )


config_option = click.option(
    "--config",
    "-c",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Path to YAML/JSON run configuration",
)
out_dir_option = click.option(
    "--out-dir",
    type=click.Path(file_okay=False, path_type=Path),
    help="Run directory (overrides config)",
)
variant_option = click.option(
    "--variant", type=click.Choice(sorted(VARIANTS)), help="Ablation preset (overrides config)"
)
seed_option = click.option("--seed", type=int, help="Random seed (overrides config)")


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose output")
@click.version_option(version=__version__)
@click.pass_context
def main(ctx: click.Context, verbose: bool) -> None:
    """
    UGMCS-Net - lung nodule segmentation from multi-annotator masks.

    Trains and evaluates a network that predicts the union and intersection
    of the annotation set alongside the final segmentation, and runs the
    cross-validation, comparison, HU-distribution and complex-nodule harnesses.
    """
    ctx.ensure_object(dict)
    ctx.obj["verbose"] = verbose


@main.command()
@click.option("--count", type=click.IntRange(min=1), required=True, help="Number of nodules")
@click.option("--annotators", type=click.IntRange(2, 4), default=4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--size", type=click.IntRange(min=8), default=50, show_default=True, help="Patch size"
)
@click.option("--out", required=True, type=click.Path(path_type=Path), help="Dataset directory")
@click.pass_context
@guarded
def synth(ctx: click.Context, count: int, annotators: int, seed: int, size: int, out: Path) -> None:
    """Generate a synthetic multi-annotator dataset."""
    samples = synth_generate(count, annotators, seed, size)
    manifest = save_manifest(samples, out)
    _echo(ctx, f"Wrote {len(samples)} samples with {annotators} annotations each")
    click.echo(str(manifest))


@main.command()
@config_option
@click.option("--fold", type=int, required=True, help="Held-out fold index")
@out_dir_option
@variant_option
@seed_option
@click.option("--epochs", type=click.IntRange(min=1), help="Epochs (overrides config)")
@click.pass_context
@guarded
def train(
    ctx: click.Context,
    config: Path,
    fold: int,
    out_dir: Optional[Path],
    variant: Optional[str],
    seed: Optional[int],
    epochs: Optional[int],
) -> None:
    """Train one fold; writes checkpoints, logs and config echo to the run directory."""
    run_config = _run_config(config, out_dir, variant, seed, epochs)
    _check_fold(fold, run_config)
    samples = load_manifest(run_config.dataset)
    split = split_folds([s.sample_id for s in samples], run_config.folds, run_config.seed)

    run_dir = run_config.out_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config_echo(run_config, run_dir / "config.json")
    _echo(ctx, f"Loaded {len(samples)} samples from {run_config.dataset}")

    result = fit(samples, split, fold, run_config, run_dir, verbose=ctx.obj["verbose"])
    last = result.stats.epochs[-1]
    click.echo(
        f"fold {fold}: final dsc {last.dsc:.4f} iou {last.iou:.4f} nsd {last.nsd:.4f}; "
        f"best dsc {result.stats.best_dsc:.4f} at epoch {result.stats.best_epoch}"
    )
    click.echo(str(result.final_checkpoint))


@main.command(name="eval")
@config_option
@click.option(
    "--checkpoint",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
)
@click.option("--fold", type=int, required=True, help="Held-out fold index")
@click.option(
    "--annotation-index", type=click.IntRange(0, 3), help="Reference annotation (0 = Label_1)"
)
@out_dir_option
@click.pass_context
@guarded
def eval_command(
    ctx: click.Context,
    config: Path,
    checkpoint: Path,
    fold: int,
    annotation_index: Optional[int],
    out_dir: Optional[Path],
) -> None:
    """Score a checkpoint on its held-out fold."""
    run_config = _run_config(config, out_dir, annotation_index=annotation_index)
    _check_fold(fold, run_config)
    samples = load_manifest(run_config.dataset)
    split = split_folds([s.sample_id for s in samples], run_config.folds, run_config.seed)
    records = evaluate(checkpoint, samples, split, fold, run_config)

    report = single_fold_report(records, fold, run_config)
    reports_dir = run_config.out_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    stem = f"eval_fold{fold}_label{run_config.eval.annotation_index + 1}"
    report.save(reports_dir / f"{stem}.json")
    write_metrics_csv(records, reports_dir / f"{stem}.csv")
    text = render_run_report(report)
    (reports_dir / f"{stem}.txt").write_text(text)
    _echo(ctx, f"Reports written to {reports_dir}")
    click.echo(text, nl=False)


@main.command(name="crossval")
@config_option
@out_dir_option
@variant_option
@seed_option
@click.option("--epochs", type=click.IntRange(min=1), help="Epochs (overrides config)")
@click.pass_context
@guarded
def crossval_command(
    ctx: click.Context,
    config: Path,
    out_dir: Optional[Path],
    variant: Optional[str],
    seed: Optional[int],
    epochs: Optional[int],
) -> None:
    """Train and score every fold; writes the fold-table report."""
    run_config = _run_config(config, out_dir, variant, seed, epochs)
    samples = load_manifest(run_config.dataset)
    run_dir = run_config.out_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config_echo(run_config, run_dir / "config.json")

    report = crossval(samples, run_config, run_dir, verbose=ctx.obj["verbose"])
    reports_dir = run_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    report.save(reports_dir / "crossval.json")
    write_metrics_csv(
        sorted(report.records, key=lambda r: r.sample_id), reports_dir / "crossval.csv"
    )
    text = render_run_report(report)
    (reports_dir / "crossval.txt").write_text(text)
    click.echo(text, nl=False)


report_path = click.Path(exists=True, dir_okay=False, path_type=Path)


@main.command()
@click.argument("report_a", type=report_path)
@click.argument("report_b", type=report_path)
@click.option("--output", "-o", type=click.Path(path_type=Path), help="Save results as JSON")
@click.pass_context
@guarded
def compare(ctx: click.Context, report_a: Path, report_b: Path, output: Optional[Path]) -> None:
    """Paired t-test of per-sample DSC and IoU between two reports."""
    results = compare_models(RunReport.load(report_a), RunReport.load(report_b))
    if output:
        save_results({m: r.to_dict() for m, r in results.items()}, output)
        _echo(ctx, f"Results saved to {output}")
    click.echo(render_comparison(results), nl=False)


@main.command(name="complex-val")
@click.option("--baseline", required=True, type=report_path, help="Baseline report JSON")
@click.option(
    "--candidate", "candidates", required=True, multiple=True, type=report_path,
    help="Candidate report JSON (repeatable)",
)
@click.option(
    "--threshold", "thresholds", multiple=True, type=click.FloatRange(0, 100, min_open=True),
    help="Baseline DSC threshold in percent (repeatable; default 60, 70, 80)",
)
@click.option("--bands", is_flag=True, help="Also report exclusive bands between thresholds")
@click.option("--output", "-o", type=click.Path(path_type=Path), help="Save buckets as JSON")
@click.pass_context
@guarded
def complex_val(
    ctx: click.Context,
    baseline: Path,
    candidates: Tuple[Path, ...],
    thresholds: Tuple[float, ...],
    bands: bool,
    output: Optional[Path],
) -> None:
    """Compare candidates on the samples the baseline segments poorly."""
    named: Dict[str, RunReport] = {}
    for path in candidates:
        name = path.stem if path.stem not in named else str(path)
        named[name] = RunReport.load(path)
    buckets = complex_validation(
        RunReport.load(baseline), named, thresholds or DEFAULT_THRESHOLDS, bands=bands
    )
    if output:
        save_results({"buckets": [b.to_dict() for b in buckets]}, output)
        _echo(ctx, f"Buckets saved to {output}")
    click.echo(render_buckets(buckets), nl=False)


@main.command(name="hu-analysis")
@click.option(
    "--dataset",
    required=True,
    type=click.Path(exists=True, path_type=Path),
    help="Manifest or its directory",
)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--oracle", is_flag=True, help="Use the ground truth as the prediction")
@click.option(
    "--out-dir",
    type=click.Path(file_okay=False, path_type=Path),
    help="Write KDE CSVs and JSON here",
)
@click.option(
    "--plot", type=click.Path(dir_okay=False, path_type=Path), help="Render the KDE curves"
)
@click.option(
    "--size",
    type=click.IntRange(min=1),
    default=64,
    show_default=True,
    help="Grid size for --oracle",
)
@click.pass_context
@guarded
def hu_analysis(
    ctx: click.Context,
    dataset: Path,
    checkpoint: Optional[Path],
    oracle: bool,
    out_dir: Optional[Path],
    plot: Optional[Path],
    size: int,
) -> None:
    """HU distributions of true and predicted low/high-confidence regions."""
    if oracle == (checkpoint is not None):
        raise click.UsageError("pass exactly one of --oracle or --checkpoint")
    samples = load_manifest(dataset)
    model = load_checkpoint(checkpoint) if checkpoint else None
    grid = model.config.input_size if model else size
    analysis = hu_distribution_check(samples, model, size=grid)

    if out_dir:
        written = analysis.write_curves(out_dir)
        save_results(analysis.to_dict(), out_dir / "hu_analysis.json")
        _echo(ctx, f"Wrote {len(written)} KDE curves to {out_dir}")
    if plot:
        plot_hu_curves(analysis, plot)
        _echo(ctx, f"Plot saved to {plot}")
    click.echo(render_hu(analysis), nl=False)


@main.command(name="predict")
@click.option(
    "--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path)
)
@click.option("--dataset", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--output", "-o", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.pass_context
@guarded
def predict_command(ctx: click.Context, checkpoint: Path, dataset: Path, output: Path) -> None:
    """Write union, intersection, segmentation and MCM maps to a .npz file."""
    model = load_checkpoint(checkpoint)
    samples = load_manifest(dataset)
    export_predictions(model, samples, output)
    _echo(ctx, f"Predicted {len(samples)} samples")
    click.echo(str(output))


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, path_type=Path))
@click.pass_context
@guarded
def validate(ctx: click.Context, dataset: Path) -> None:
    """Check every annotation set in a manifest."""
    samples = load_manifest(dataset)
    failures = check_annotation_sets(samples)
    for report in failures:
        for violation in report.violations:
            click.echo(f"{report.sample_id}: {violation}")
    if failures:
        raise RejectedInputError(
            f"{len(failures)} of {len(samples)} samples have invalid annotation sets"
        )
    click.echo(f"{len(samples)} samples OK")


if __name__ == "__main__":
    main()
