"""Tests for the Gabor bank and Otsu thresholding."""

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from ugmcs_net.config import GaborConfig
from ugmcs_net.errors import RejectedInputError
from ugmcs_net.filters import (
    GaborFilter,
    OtsuGate,
    create_filter,
    gabor_bank,
    gabor_kernel,
    otsu_threshold,
    otsu_thresholds,
)


def _otsu_oracle(values: np.ndarray, bins: int) -> float:
    """Exhaustive scan of every bin edge with the textbook variance formula."""
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return lo
    index = np.minimum(((values - lo) * bins / (hi - lo)).astype(np.int64), bins - 1)
    best_k, best = 1, -1.0
    for k in range(1, bins):
        below, above = index[index < k], index[index >= k]
        if below.size == 0 or above.size == 0:
            var = 0.0
        else:
            w0 = below.size / index.size
            w1 = above.size / index.size
            var = w0 * w1 * (below.mean() - above.mean()) ** 2
        if var > best * (1 + 1e-12) + 1e-300:
            best_k, best = k, var
    return lo + best_k * (hi - lo) / bins


def test_gabor_kernel_shape_and_peak() -> None:
    """Test the kernel is 7x7 and peaks at the centre for zero phase."""
    config = GaborConfig()
    kernel = gabor_kernel(0.0, config)

    assert kernel.shape == (7, 7)
    assert kernel[3, 3] == pytest.approx(1.0)
    assert np.unravel_index(np.argmax(kernel), kernel.shape) == (3, 3)
    assert gabor_bank(config).shape == (4, 7, 7)


def test_gabor_constant_input() -> None:
    """Test a constant map is scaled by the averaged kernel sum."""
    config = GaborConfig()
    x = torch.full((1, 2, 9, 9), 0.7, dtype=torch.float64)
    out = GaborFilter(config)(x)

    assert out.shape == x.shape
    gain = float(gabor_bank(config).mean(axis=0).sum())
    assert torch.allclose(out, torch.full_like(x, 0.7 * gain), atol=1e-12)


def test_gabor_zero_input_stays_zero() -> None:
    """Test the filter maps zeros to zeros."""
    out = GaborFilter(GaborConfig())(torch.zeros(2, 3, 8, 8))

    assert not out.any()


def test_gabor_edge_orientation() -> None:
    """Test a vertical step edge responds most to the x-aligned orientation."""
    x = torch.zeros(1, 1, 21, 21, dtype=torch.float64)
    x[..., 11:] = 1.0
    config = GaborConfig(phase=np.pi / 2)
    bank = torch.from_numpy(gabor_bank(config))[:, None]
    padded = F.pad(x, (3, 3, 3, 3), mode="replicate")
    responses = F.conv2d(padded, bank)[0]

    energy = responses[:, 5:16, 5:16].abs().sum(dim=(1, 2))
    assert int(torch.argmax(energy)) == 0
    assert energy[0] > energy[2]
    assert torch.allclose(responses.mean(dim=0), GaborFilter(config)(x)[0, 0], atol=1e-12)


def test_gabor_has_no_parameters() -> None:
    """Test the bank is fixed."""
    module = GaborFilter(GaborConfig())

    assert list(module.parameters()) == []
    assert "bank" not in module.state_dict()


def test_otsu_two_groups() -> None:
    """Test the canonical lowest separating edge."""
    values = np.array([0, 0, 0, 0, 10, 10, 10, 10], dtype=np.float64)
    t = otsu_threshold(values, bins=256)

    assert 0.0 < t <= 10.0
    assert t == pytest.approx(10.0 / 256)


def test_otsu_constant_input() -> None:
    """Test a constant array returns its value."""
    assert otsu_threshold(np.full(10, 3.5)) == 3.5


def test_otsu_rejects_bad_input() -> None:
    """Test empty input and non-finite values."""
    with pytest.raises(RejectedInputError):
        otsu_threshold(np.array([]))
    with pytest.raises(RejectedInputError):
        otsu_threshold(np.array([0.0, np.inf]))


def test_otsu_matches_exhaustive_oracle() -> None:
    """Test 500 random arrays against a brute-force between-class variance scan."""
    rng = np.random.default_rng(0)
    for trial in range(500):
        bins = int(rng.choice([4, 16, 64]))
        n = int(rng.integers(2, 60))
        if trial % 3 == 0:
            values = rng.integers(0, 6, size=n).astype(np.float64)
        else:
            values = rng.normal(size=n) * rng.uniform(0.1, 10)
        assert otsu_threshold(values, bins) == _otsu_oracle(values, bins)


def test_batched_otsu_matches_scalar() -> None:
    """Test the tensor version agrees with the numpy version per channel."""
    rng = np.random.default_rng(1)
    x = torch.from_numpy(rng.normal(size=(2, 3, 6, 6)))
    thresholds = otsu_thresholds(x, bins=32)

    assert thresholds.shape == (2, 3, 1, 1)
    for n in range(2):
        for c in range(3):
            expected = otsu_threshold(x[n, c].numpy(), bins=32)
            assert float(thresholds[n, c]) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_otsu_gate() -> None:
    """Test the gate keeps values at or above the threshold and passes gradients."""
    x = torch.tensor([[[[0.0, 0.0, 10.0, 10.0]]]], requires_grad=True)
    out = OtsuGate(bins=256)(x)

    assert out.detach().tolist() == [[[[0.0, 0.0, 10.0, 10.0]]]]
    out.sum().backward()
    assert x.grad is not None
    assert x.grad.tolist() == [[[[0.0, 0.0, 1.0, 1.0]]]]
    assert not OtsuGate()(torch.zeros(1, 2, 3, 3)).any()


def test_create_filter() -> None:
    """Test the filter factory."""
    assert isinstance(create_filter("gabor", GaborConfig(), 256), GaborFilter)
    assert isinstance(create_filter("otsu", GaborConfig(), 256), OtsuGate)
    with pytest.raises(ValueError, match="Unsupported filter kind"):
        create_filter("sobel", GaborConfig(), 256)
