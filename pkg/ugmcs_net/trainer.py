"""Training loop: SGD with momentum, warm-restart cosine schedule, per-fold checkpoints."""

import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
import numpy as np
import torch
from torch.utils.data import DataLoader

from . import metrics
from .config import EvalConfig, LossConfig, RunConfig, TrainConfig
from .dataio import FoldSplit, NoduleDataset, NoduleSample
from .errors import RejectedInputError
from .losses import LossBreakdown, objective
from .metrics import MetricsRecord
from .model import UGMCSNet, build_model, net_forward, predict, save_checkpoint


@dataclass
class EpochRecord:
    """One line of the training log."""

    epoch: int
    lr: float
    loss: float
    dsc: float
    iou: float
    nsd: float

    def to_line(self) -> str:
        return (
            f"{self.epoch} {self.lr:.8g} {self.loss:.8g} "
            f"{self.dsc:.6f} {self.iou:.6f} {self.nsd:.6f}"
        )


@dataclass
class TrainingStats:
    """Statistics for one fold's training run."""

    fold: int
    steps: int = 0
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_dsc: float = -1.0

    def add_epoch(self, record: EpochRecord) -> bool:
        """Record an epoch; returns True when it improves the held-out DSC."""
        self.epochs.append(record)
        if record.dsc > self.best_dsc:
            self.best_dsc = record.dsc
            self.best_epoch = record.epoch
            return True
        return False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fold": self.fold,
            "steps": self.steps,
            "best_epoch": self.best_epoch,
            "best_dsc": self.best_dsc,
            "epochs": [asdict(e) for e in self.epochs],
        }


@dataclass
class FitResult:
    model: UGMCSNet
    stats: TrainingStats
    final_checkpoint: Path
    best_checkpoint: Path
    train_log: Path
    loss_log: Path


def sgdr_lr(epoch: int, config: TrainConfig) -> float:
    """Cosine annealing from lr_max to lr_min, restarting every `restart_period` epochs."""
    if epoch < 0:
        raise RejectedInputError(f"epoch must be >= 0, got {epoch}")
    e = epoch % config.restart_period
    span = config.lr_max - config.lr_min
    return config.lr_min + 0.5 * span * (1.0 + math.cos(math.pi * e / config.restart_period))


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.SGD:
    """v <- mu v + g + wd theta; theta <- theta - lr v."""
    return torch.optim.SGD(
        model.parameters(),
        lr=config.lr_max,
        momentum=config.momentum,
        dampening=0.0,
        weight_decay=config.weight_decay,
    )


def train_step(
    model: UGMCSNet,
    optimizer: torch.optim.Optimizer,
    batch: Dict[str, Any],
    lr: float,
    loss_config: LossConfig,
) -> LossBreakdown:
    """One forward/backward/update on `batch` at learning rate `lr`."""
    model.train()
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad()
    dtype = next(model.parameters()).dtype
    outputs = net_forward(model, batch["image"].to(dtype))
    total, breakdown = objective(outputs, batch, loss_config)
    total.backward()
    optimizer.step()
    return breakdown


def stack_images(dataset: NoduleDataset) -> torch.Tensor:
    return torch.from_numpy(np.stack([item.image for item in dataset.inputs]))


def evaluate_model(
    model: UGMCSNet, dataset: NoduleDataset, config: EvalConfig, batch_size: int = 32
) -> List[MetricsRecord]:
    """Score X_S binarized at the threshold against the chosen annotation of every sample."""
    if len(dataset) == 0:
        raise RejectedInputError("cannot evaluate an empty sample set")
    maps = predict(model, stack_images(dataset), batch_size)
    records = []
    for item, prob in zip(dataset.inputs, maps["x_s"]):
        if config.annotation_index >= len(item.annotations):
            raise RejectedInputError(
                f"{item.sample_id}: annotation_index {config.annotation_index} but only "
                f"{len(item.annotations)} annotations"
            )
        gt = item.annotations[config.annotation_index]
        pred = (prob >= config.threshold).astype(np.uint8)
        records.append(metrics.score(item.sample_id, pred, gt, config.nsd_tolerance))
    return records


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


def fold_datasets(
    samples: Sequence[NoduleSample], split: FoldSplit, fold: int, size: int
) -> Tuple[NoduleDataset, NoduleDataset]:
    """Training (all other folds) and held-out datasets for `fold`, in sorted id order."""
    by_id = {s.sample_id: s for s in samples}
    missing = sorted(set(split.assignments) - set(by_id))
    if missing:
        raise RejectedInputError(f"fold split names unknown samples: {missing[:5]}")
    test_ids = sorted(split.test_ids(fold))
    if not test_ids:
        raise RejectedInputError(f"fold {fold} has no samples")
    train_ids = sorted(split.train_ids(fold))
    return (
        NoduleDataset([by_id[i] for i in train_ids], size),
        NoduleDataset([by_id[i] for i in test_ids], size),
    )


def fit(
    samples: Sequence[NoduleSample],
    split: FoldSplit,
    fold: int,
    config: RunConfig,
    out_dir: Path,
    verbose: bool = False,
) -> FitResult:
    """
    Train on every fold except `fold`, evaluating on it after each epoch.

    Writes logs/train_fold{k}.log (epoch lr loss dsc iou nsd), logs/loss_fold{k}.log
    (step l_mcm phi_a phi_b total) and checkpoints/fold{k}_{final,best}.pt.
    """
    train_set, test_set = fold_datasets(samples, split, fold, config.net.input_size)
    tc = config.train

    seed_everything(tc.seed)
    model = build_model(config.net, tc.seed)
    optimizer = make_optimizer(model, tc)
    loader = DataLoader(
        train_set,
        batch_size=tc.batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(tc.seed),
        num_workers=0,
    )

    logs_dir = out_dir / "logs"
    ckpt_dir = out_dir / "checkpoints"
    logs_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    train_log = logs_dir / f"train_fold{fold}.log"
    loss_log = logs_dir / f"loss_fold{fold}.log"
    best_path = ckpt_dir / f"fold{fold}_best.pt"
    final_path = ckpt_dir / f"fold{fold}_final.pt"

    if verbose:
        click.echo(
            f"Fold {fold}: {len(train_set)} training / {len(test_set)} held-out samples, "
            f"{tc.epochs} epochs"
        )

    stats = TrainingStats(fold=fold)
    with open(train_log, "w") as epoch_out, open(loss_log, "w") as step_out:
        for epoch in range(tc.epochs):
            lr = sgdr_lr(epoch, tc)
            totals = []
            for batch in loader:
                b = train_step(model, optimizer, batch, lr, config.loss)
                stats.steps += 1
                totals.append(b.total)
                step_out.write(
                    f"{stats.steps} {b.l_mcm:.8g} {b.phi_a:.8g} {b.phi_b:.8g} {b.total:.8g}\n"
                )

            records = evaluate_model(model, test_set, config.eval, tc.batch_size)
            record = EpochRecord(
                epoch=epoch,
                lr=lr,
                loss=_mean(totals),
                dsc=_mean([r.dsc for r in records]),
                iou=_mean([r.iou for r in records]),
                nsd=_mean([r.nsd for r in records]),
            )
            epoch_out.write(record.to_line() + "\n")
            if stats.add_epoch(record):
                save_checkpoint(model, best_path)
            if verbose:
                click.echo(
                    f"  epoch {epoch:4d}  lr {lr:.3g}  loss {record.loss:.4f}  "
                    f"dsc {record.dsc:.4f}  iou {record.iou:.4f}  nsd {record.nsd:.4f}"
                )

    save_checkpoint(model, final_path)
    return FitResult(model, stats, final_path, best_path, train_log, loss_log)
