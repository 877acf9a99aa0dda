"""Tests for the learning-rate schedule, optimiser step and fold training."""

import copy
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pytest
import torch
from torch.utils.data import default_collate

from ugmcs_net.config import LossConfig, RunConfig, TrainConfig, build_config
from ugmcs_net.dataio import NoduleDataset, NoduleSample, split_folds, synth_generate
from ugmcs_net.errors import RejectedInputError
from ugmcs_net.losses import objective
from ugmcs_net.maskops import AnnotationSet
from ugmcs_net.model import build_model, load_checkpoint, net_forward
from ugmcs_net.trainer import (
    EpochRecord,
    TrainingStats,
    evaluate_model,
    fit,
    fold_datasets,
    make_optimizer,
    sgdr_lr,
    train_step,
)

TINY_NET = {
    "depth": 2,
    "base_channels": 4,
    "feature_channels": 8,
    "input_size": 16,
    "attention_channels": 4,
}
SMOOTH_FILTERS = {"uni": "gabor", "lc": "gabor", "hc": "gabor"}


def _tiny_run(tmp_path: Path) -> RunConfig:
    return build_config(
        {
            "dataset": str(tmp_path),
            "folds": 2,
            "net": TINY_NET,
            "train": {"batch_size": 4, "epochs": 2, "lr_max": 0.01, "restart_period": 2},
        }
    )


def _batch(count: int, size: int, seed: int = 0) -> Dict[str, Any]:
    dataset = NoduleDataset(synth_generate(count, 3, seed=seed), size)
    batch: Dict[str, Any] = default_collate([dataset[i] for i in range(count)])
    return batch


def test_sgdr_values() -> None:
    """Test the schedule at the start, middle and restart of a period."""
    config = TrainConfig()

    assert sgdr_lr(0, config) == pytest.approx(1e-5)
    assert sgdr_lr(25, config) == pytest.approx(5e-6)
    assert sgdr_lr(50, config) == pytest.approx(1e-5)
    assert sgdr_lr(49, config) < sgdr_lr(1, config)


def test_sgdr_periodic_and_bounded() -> None:
    """Test lr(e + T) = lr(e) and lr_min <= lr <= lr_max."""
    config = TrainConfig(lr_max=0.1, lr_min=0.01, restart_period=7)
    for epoch in range(40):
        lr = sgdr_lr(epoch, config)
        assert 0.01 <= lr <= 0.1
        assert lr == pytest.approx(sgdr_lr(epoch + 7, config))
    for epoch in range(6):
        assert sgdr_lr(epoch + 1, config) < sgdr_lr(epoch, config)


def test_sgdr_rejects_negative_epoch() -> None:
    """Test negative epochs."""
    with pytest.raises(RejectedInputError):
        sgdr_lr(-1, TrainConfig())


def test_zero_lr_leaves_parameters() -> None:
    """Test a step at lr = 0 changes nothing."""
    model = build_model(build_config({"dataset": ".", "net": TINY_NET}).net, seed=0)
    before = copy.deepcopy(model.state_dict())
    optimizer = make_optimizer(model, TrainConfig())

    train_step(model, optimizer, _batch(2, 16), 0.0, LossConfig())

    for name, value in model.state_dict().items():
        assert torch.equal(value, before[name]), name


def test_plain_step_is_gradient_descent() -> None:
    """Test momentum 0 and weight decay 0 give theta - lr * grad."""
    net = build_config({"dataset": ".", "net": TINY_NET}).net
    model = build_model(net, seed=1).double()
    reference = copy.deepcopy(model)
    batch = _batch(2, 16, seed=4)
    lr = 0.05

    total, _ = objective(net_forward(reference, batch["image"].double()), batch, LossConfig())
    total.backward()
    expected = {
        n: p.detach() - lr * (p.grad if p.grad is not None else torch.zeros_like(p))
        for n, p in reference.named_parameters()
    }

    optimizer = make_optimizer(model, TrainConfig(momentum=0.0, weight_decay=0.0))
    train_step(model, optimizer, batch, lr, LossConfig())

    for name, param in model.named_parameters():
        assert torch.allclose(param.detach(), expected[name], rtol=0, atol=1e-12), name


def test_equal_seeds_equal_trajectories() -> None:
    """Test two runs from the same seed produce identical losses and weights."""
    net = build_config({"dataset": ".", "net": TINY_NET}).net
    batch = _batch(4, 16, seed=2)
    runs = []
    for _ in range(2):
        model = build_model(net, seed=7)
        optimizer = make_optimizer(model, TrainConfig())
        losses = [train_step(model, optimizer, batch, 0.01, LossConfig()).total for _ in range(3)]
        runs.append((losses, model.state_dict()))

    assert runs[0][0] == runs[1][0]
    for name, value in runs[0][1].items():
        assert torch.equal(value, runs[1][1][name])


def test_small_steps_descend() -> None:
    """Test repeated small steps on one batch do not increase the loss."""
    net = build_config({"dataset": ".", "net": {**TINY_NET, "filters": SMOOTH_FILTERS}}).net
    model = build_model(net, seed=3).double()
    optimizer = make_optimizer(model, TrainConfig(momentum=0.0, weight_decay=0.0))
    batch = _batch(4, 16, seed=5)

    losses = [train_step(model, optimizer, batch, 1e-3, LossConfig()).total for _ in range(11)]

    for before, after in zip(losses, losses[1:]):
        assert after <= before + 1e-12
    assert losses[-1] < losses[0]


def test_training_stats() -> None:
    """Test best-epoch tracking and serialisation."""
    stats = TrainingStats(fold=1)

    assert stats.add_epoch(EpochRecord(0, 0.1, 1.0, 0.5, 0.4, 0.6))
    assert not stats.add_epoch(EpochRecord(1, 0.05, 0.9, 0.4, 0.3, 0.5))
    assert stats.add_epoch(EpochRecord(2, 0.01, 0.8, 0.7, 0.6, 0.8))

    result = stats.to_dict()
    assert result["fold"] == 1
    assert result["best_epoch"] == 2
    assert result["best_dsc"] == 0.7
    assert len(result["epochs"]) == 3
    line = EpochRecord(3, 0.5, 0.25, 1.0, 1.0, 1.0).to_line()
    assert line == "3 0.5 0.25 1.000000 1.000000 1.000000"


def test_fold_datasets() -> None:
    """Test held-out and training sets partition the corpus in sorted order."""
    samples = synth_generate(10, 2, seed=0)
    split = split_folds([s.sample_id for s in samples], 2, seed=0)
    train, test = fold_datasets(samples, split, 0, 16)

    train_ids = [item.sample_id for item in train.inputs]
    test_ids = [item.sample_id for item in test.inputs]
    assert train_ids == sorted(train_ids)
    assert sorted(train_ids + test_ids) == sorted(s.sample_id for s in samples)
    with pytest.raises(RejectedInputError):
        fold_datasets(samples[:5], split, 0, 16)


def test_evaluate_rejects_missing_annotation() -> None:
    """Test evaluating against an annotator index the samples lack."""
    config = build_config({"dataset": ".", "net": TINY_NET, "eval": {"annotation_index": 3}})
    model = build_model(config.net, seed=0)
    dataset = NoduleDataset(synth_generate(2, 2, seed=0), 16)

    with pytest.raises(RejectedInputError):
        evaluate_model(model, dataset, config.eval)


def test_fit_writes_logs_and_checkpoints(tmp_path: Path) -> None:
    """Test one fold of a tiny run end to end."""
    config = _tiny_run(tmp_path)
    samples = synth_generate(10, 3, seed=1)
    split = split_folds([s.sample_id for s in samples], 2, seed=0)

    result = fit(samples, split, 0, config, tmp_path / "run")

    lines = result.train_log.read_text().splitlines()
    assert len(lines) == 2
    assert [line.split()[0] for line in lines] == ["0", "1"]
    assert len(lines[0].split()) == 6
    # 5 training samples at batch size 4 is two steps per epoch
    assert result.stats.steps == 4
    assert len(result.loss_log.read_text().splitlines()) == 4
    assert result.final_checkpoint.exists()
    assert result.best_checkpoint.exists()

    _, test_set = fold_datasets(samples, split, 0, 16)
    loaded = load_checkpoint(result.final_checkpoint, expected=config.net)
    before = evaluate_model(result.model, test_set, config.eval)
    after = evaluate_model(loaded, test_set, config.eval)
    assert before == after


@pytest.mark.slow
def test_overfit_eight_samples() -> None:
    """Test the full objective memorises eight three-reader nodules within 300 steps."""
    config = build_config(
        {
            "dataset": ".",
            "net": {"depth": 2, "base_channels": 8, "feature_channels": 16, "input_size": 32},
        }
    )
    assert config.loss == LossConfig()
    # two of three readers agree with the first, so the fused target thresholds to it
    samples = []
    for s in synth_generate(8, 2, seed=0):
        first, second = s.annotations.masks
        readers = AnnotationSet((first, first, second), s.sample_id)
        samples.append(NoduleSample(s.sample_id, s.hu_patch, readers))
    torch.manual_seed(0)
    dataset = NoduleDataset(samples, 32)
    batch: Dict[str, Any] = default_collate([dataset[i] for i in range(8)])
    model = build_model(config.net, seed=0)
    optimizer = make_optimizer(model, TrainConfig(momentum=0.9, weight_decay=0.0))

    for _ in range(300):
        train_step(model, optimizer, batch, 0.05, config.loss)

    records = evaluate_model(model, dataset, config.eval)
    assert float(np.mean([r.dsc for r in records])) >= 0.90
