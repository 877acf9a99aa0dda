"""Tests for mask algebra over annotation sets."""

import numpy as np
import pytest
import torch

from ugmcs_net.errors import RejectedInputError
from ugmcs_net.maskops import (
    AnnotationSet,
    compose_mcm,
    intersection,
    lc_mask,
    union,
    validate_annotation_set,
)


def test_union_and_intersection_examples() -> None:
    """Test element-wise OR and AND on small masks."""
    a = AnnotationSet.of([[[1, 0], [0, 0]], [[0, 1], [0, 0]]])
    assert union(a).tolist() == [[1, 1], [0, 0]]

    b = AnnotationSet.of([[[1, 1], [0, 0]], [[0, 1], [0, 0]]])
    assert intersection(b).tolist() == [[0, 1], [0, 0]]
    assert lc_mask(b).tolist() == [[1, 0], [0, 0]]


def test_idempotence_and_identity() -> None:
    """Test {M, M} and {M, ones} reduce to M."""
    rng = np.random.default_rng(0)
    m = (rng.random((6, 6)) < 0.5).astype(np.uint8)

    assert np.array_equal(union(AnnotationSet.of([m, m])), m)
    assert np.array_equal(intersection(AnnotationSet.of([m, np.ones_like(m)])), m)
    assert not lc_mask(AnnotationSet.of([m, m])).any()


def test_random_sets_match_pixelwise_oracle() -> None:
    """Test 1000 random sets against per-pixel max/min and the containment chain."""
    rng = np.random.default_rng(1)
    for _ in range(1000):
        k = int(rng.integers(2, 5))
        stack = (rng.random((k, 16, 16)) < rng.uniform(0.2, 0.8)).astype(np.uint8)
        annotations = AnnotationSet.of(list(stack))
        u, i, lc = union(annotations), intersection(annotations), lc_mask(annotations)

        assert np.array_equal(u, stack.max(axis=0))
        assert np.array_equal(i, stack.min(axis=0))
        assert np.array_equal(lc, u & (1 - i))
        for gt in stack:
            assert not (i & (1 - gt)).any()
            assert not (gt & (1 - u)).any()
        assert np.array_equal(lc | i, u)
        assert not (lc & i).any()

        mcm = compose_mcm(u.astype(np.float64), i.astype(np.float64))
        assert set(np.unique(mcm)) <= {0.0, 0.5, 1.0}
        assert np.all(mcm[i == 1] == 1.0)
        assert np.all(mcm[lc == 1] == 0.5)
        assert np.all(mcm[u == 0] == 0.0)

        reordered = AnnotationSet.of(list(stack[::-1]))
        assert np.array_equal(union(reordered), u)
        assert np.array_equal(intersection(reordered), i)


def test_shape_mismatch_rejected() -> None:
    """Test masks of different sizes are rejected."""
    annotations = AnnotationSet.of([np.zeros((4, 4)), np.zeros((4, 5))])

    with pytest.raises(RejectedInputError):
        union(annotations)
    with pytest.raises(RejectedInputError):
        intersection(annotations)
    with pytest.raises(RejectedInputError):
        lc_mask(annotations)


def test_compose_mcm_arithmetic() -> None:
    """Test the division-by-two normalisation."""
    out = compose_mcm(np.array([[1.0, 1.0]]), np.array([[0.0, 1.0]]))
    assert out.tolist() == [[0.5, 1.0]]

    zeros = np.zeros((3, 3))
    assert not compose_mcm(zeros, zeros).any()

    assert compose_mcm(np.array([0.8]), np.array([0.4]))[0] == pytest.approx(0.6)


def test_compose_mcm_on_tensors() -> None:
    """Test tensors are supported and stay tensors."""
    out = compose_mcm(torch.tensor([[1.0, 0.2]]), torch.tensor([[0.0, 0.2]]))

    assert isinstance(out, torch.Tensor)
    assert torch.allclose(out, torch.tensor([[0.5, 0.2]]))


def test_compose_mcm_rejects_out_of_range() -> None:
    """Test values outside [0, 1] are rejected."""
    with pytest.raises(RejectedInputError):
        compose_mcm(np.array([1.5]), np.array([0.0]))
    with pytest.raises(RejectedInputError):
        compose_mcm(np.array([0.5]), np.array([-0.1]))
    with pytest.raises(RejectedInputError):
        compose_mcm(np.zeros(2), np.zeros(3))


def test_validate_annotation_set() -> None:
    """Test the validation report for passing and failing sets."""
    ok = validate_annotation_set(AnnotationSet.of([np.zeros((64, 64)), np.ones((64, 64))], "s1"))
    assert ok.ok
    assert ok.sample_id == "s1"

    single = validate_annotation_set(AnnotationSet.of([np.zeros((4, 4))]))
    assert not single.ok
    assert any("count" in v for v in single.violations)

    bad = np.zeros((4, 4), dtype=np.uint8)
    bad[0, 0] = 2
    non_binary = validate_annotation_set(AnnotationSet((bad, np.zeros((4, 4), dtype=np.uint8))))
    assert not non_binary.ok
    assert any("non-binary" in v for v in non_binary.violations)

    too_many = validate_annotation_set(AnnotationSet.of([np.zeros((4, 4))] * 5))
    assert any("count" in v for v in too_many.violations)
