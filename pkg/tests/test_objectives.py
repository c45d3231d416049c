import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import central_diff, rel_err
from ptlf.objectives import (
    AugKind,
    AugmentationPipeline,
    AugOp,
    augment,
    barlow_twins_loss,
    barlow_twins_objective,
    cross_entropy,
    simsiam_loss,
)

seeds = st.integers(0, 2**32 - 1)


def unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def naive_simsiam(p1, z1, p2, z2):
    def d(p, z):
        return -np.mean([pi @ zi / (np.linalg.norm(pi) * np.linalg.norm(zi)) for pi, zi in zip(p, z)])

    return 0.5 * d(p1, z2) + 0.5 * d(p2, z1)


def naive_barlow(z1, z2, lam):
    """Loop-form cross-correlation of batch-standardized embeddings."""
    b, dim = z1.shape

    def std(z):
        mu = z.mean(axis=0)
        sd = np.sqrt(((z - mu) ** 2).mean(axis=0))
        return (z - mu) / sd

    a, c = std(z1), std(z2)
    total = 0.0
    for i in range(dim):
        for j in range(dim):
            cij = sum(a[n, i] * c[n, j] for n in range(b)) / b
            total += (1 - cij) ** 2 if i == j else lam * cij**2
    return total


def test_simsiam_aligned_is_minus_one(rng):
    z = unit_rows(rng.standard_normal((4, 3)))
    w = unit_rows(rng.standard_normal((4, 3)))
    assert simsiam_loss(w, z, z, w).value == pytest.approx(-1.0, abs=1e-15)


def test_simsiam_orthogonal_is_zero():
    p = np.array([[1.0, 0.0]])
    z = np.array([[0.0, 1.0]])
    assert simsiam_loss(p, z, p, z).value == 0.0


def test_simsiam_matches_loop_oracle_and_fd(rng):
    p1, z1, p2, z2 = (rng.standard_normal((4, 8)) for _ in range(4))
    lv = simsiam_loss(p1, z1, p2, z2)
    assert lv.value == pytest.approx(naive_simsiam(p1, z1, p2, z2), abs=1e-14)
    assert rel_err(lv.grads[0], central_diff(lambda: simsiam_loss(p1, z1, p2, z2).value, p1)) <= 1e-4
    assert rel_err(lv.grads[2], central_diff(lambda: simsiam_loss(p1, z1, p2, z2).value, p2)) <= 1e-4
    for g in (lv.grads[1], lv.grads[3]):
        assert np.all(g == 0.0)


def test_simsiam_zero_rows_stay_finite():
    zero = np.zeros((2, 3))
    lv = simsiam_loss(zero, zero, zero, zero)
    assert lv.value == 0.0 and all(np.all(np.isfinite(g)) for g in lv.grads)


@settings(max_examples=50, deadline=None)
@given(seeds, st.integers(1, 6), st.integers(1, 6))
def test_simsiam_bounded_and_symmetric(seed, b, d):
    r = np.random.default_rng(seed)
    p1, z1, p2, z2 = (r.standard_normal((b, d)) for _ in range(4))
    v = simsiam_loss(p1, z1, p2, z2).value
    assert -1.0 - 1e-12 <= v <= 1.0 + 1e-12
    assert simsiam_loss(p2, z2, p1, z1).value == pytest.approx(v, abs=1e-15)


def test_barlow_identical_views_zero(rng):
    z = rng.standard_normal((16, 3))
    # C is the correlation matrix: unit diagonal, so only the off-diagonal penalty remains
    assert barlow_twins_loss(z, z.copy(), 5e-3).value == pytest.approx(
        5e-3 * np.sum((np.corrcoef(z.T) - np.eye(3)) ** 2), abs=1e-12
    )
    # uncorrelated dimensions by construction: exact zero
    z = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    assert barlow_twins_loss(z, z.copy(), 5e-3).value == 0.0


def test_barlow_zero_correlation_injection():
    value, grad = barlow_twins_objective(np.zeros((5, 5)), 5e-3)
    assert value == 5.0
    np.testing.assert_array_equal(np.diag(grad), -2.0)


def test_barlow_matches_loop_oracle_and_fd(rng):
    z1, z2 = rng.standard_normal((8, 4)), rng.standard_normal((8, 4))
    lv = barlow_twins_loss(z1, z2, 5e-3)
    assert lv.value == pytest.approx(naive_barlow(z1, z2, 5e-3), rel=1e-12)
    assert rel_err(lv.grads[0], central_diff(lambda: barlow_twins_loss(z1, z2, 5e-3).value, z1)) <= 1e-4
    assert rel_err(lv.grads[1], central_diff(lambda: barlow_twins_loss(z1, z2, 5e-3).value, z2)) <= 1e-4


def test_barlow_objective_gradient_fd(rng):
    c = rng.standard_normal((4, 4))
    _, grad = barlow_twins_objective(c, 0.1)
    assert rel_err(grad, central_diff(lambda: barlow_twins_objective(c, 0.1)[0], c)) <= 1e-6


@settings(max_examples=50, deadline=None)
@given(seeds, st.integers(2, 10), st.integers(1, 5))
def test_barlow_nonnegative_and_affine_invariant(seed, b, d):
    r = np.random.default_rng(seed)
    z1, z2 = r.standard_normal((b, d)), r.standard_normal((b, d))
    v = barlow_twins_loss(z1, z2).value
    assert v >= 0.0
    scale, shift = r.uniform(0.2, 5.0, d), r.normal(0, 3, d)
    moved = barlow_twins_loss(z1 * scale + shift, z2, 5e-3).value
    assert abs(moved - v) <= 1e-9 * max(1.0, v)


def test_barlow_rejects_single_sample():
    with pytest.raises(ValueError, match="at least 2"):
        barlow_twins_loss(np.ones((1, 3)), np.ones((1, 3)))


def test_cross_entropy_uniform_is_ln4():
    assert cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3])).value == pytest.approx(math.log(4), abs=1e-15)


def test_cross_entropy_saturates():
    logits = np.array([[1000.0, 0.0, 0.0]])
    lv = cross_entropy(logits, np.array([0]))
    assert lv.value == 0.0 and np.all(np.isfinite(lv.grads[0]))


def test_cross_entropy_fd(rng):
    logits, labels = rng.standard_normal((5, 3)), np.array([0, 2, 1, 1, 0])
    lv = cross_entropy(logits, labels)
    assert rel_err(lv.grads[0], central_diff(lambda: cross_entropy(logits, labels).value, logits)) <= 1e-4


def test_cross_entropy_label_range():
    with pytest.raises(ValueError, match="label 3"):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def pipe(ops, seed=0):
    return AugmentationPipeline(4, 4, 3, ops=ops, seed=seed)


def test_augment_zero_probabilities_is_identity(rng):
    x = rng.random(48)
    ops = tuple(AugOp(k, 0.0, 2) for k in AugKind)
    np.testing.assert_array_equal(augment(pipe(ops), x), x)


def test_augment_double_flip_is_identity(rng):
    x = rng.random(48)
    flip = (AugOp(AugKind.FLIP, 1.0), AugOp(AugKind.FLIP, 1.0))
    np.testing.assert_array_equal(augment(pipe(flip), x), x)
    once = augment(pipe(flip[:1]), x).reshape(4, 4, 3)
    np.testing.assert_array_equal(once, x.reshape(4, 4, 3)[:, ::-1, :])


def test_augment_seeded_repeatable(rng):
    x = rng.random((5, 48))
    a = augment(AugmentationPipeline(4, 4, 3, seed=9), x)
    b = augment(AugmentationPipeline(4, 4, 3, seed=9), x)
    assert a.tobytes() == b.tobytes()
    assert a.shape == x.shape


def test_augment_shift_moves_pixels():
    img = np.zeros((4, 4, 1))
    img[1, 1, 0] = 1.0
    p = AugmentationPipeline(4, 4, 1, ops=(AugOp(AugKind.SHIFT_CROP, 1.0, 1),), seed=3)
    out = augment(p, img.reshape(-1)).reshape(4, 4)
    assert out.sum() == 1.0 and abs(np.argwhere(out)[0] - [1, 1]).max() <= 1


def test_augment_geometry_mismatch():
    with pytest.raises(ValueError, match="geometry"):
        augment(pipe(()), np.zeros(10))


def test_augment_shift_larger_than_image():
    p = AugmentationPipeline(1, 2, 1, ops=(AugOp(AugKind.SHIFT_CROP, 1.0, 3),), seed=0)
    for _ in range(30):
        out = augment(p, np.array([1.0, 2.0]))
        assert out.shape == (2,) and set(out) <= {0.0, 1.0, 2.0}
