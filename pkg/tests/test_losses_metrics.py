import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelseg import losses_metrics as lm
from voxelseg import tensor_core as tc
from voxelseg.errors import LabelOutOfRange, ShapeMismatch

from gradcheck import numeric_grad, rel_error


def random_probs(rng, shape):
    return tc.softmax_channels(rng.standard_normal(shape) * 2)


def test_one_hot():
    assert lm.one_hot(np.array([2])).tolist() == [[0, 0, 1, 0]]
    assert lm.one_hot(np.array([0])).tolist() == [[1, 0, 0, 0]]
    m = np.random.default_rng(0).integers(0, 4, (5, 6, 7)).astype(np.uint8)
    oh = lm.one_hot(m)
    assert np.all(oh.sum(-1) == 1)
    assert np.array_equal(oh.argmax(-1), m)
    with pytest.raises(LabelOutOfRange):
        lm.one_hot(np.array([4]))


def test_dice_half_confidence_voxel():
    t = np.array([[1.0, 0, 0, 0]])
    p = np.array([[0.5, 0.5, 0, 0]])
    per = lm.dice_per_class(t, p)
    # class 0: 1 - 2*0.5 / (1 + 0.5)
    assert per[0] == pytest.approx(1 / 3, abs=1e-6)


def test_dice_perfect_and_disjoint():
    m = np.random.default_rng(1).integers(0, 4, 100)
    t = lm.one_hot(m, dtype=np.float64)
    assert lm.dice_loss(t, t).scalar == pytest.approx(0.0, abs=1e-6)
    disjoint = lm.one_hot((m + 1) % 4, dtype=np.float64)
    assert lm.dice_loss(t, disjoint, smooth=1e-12).scalar == pytest.approx(1.0, abs=1e-9)


def test_dice_symmetric():
    rng = np.random.default_rng(2)
    a, b = random_probs(rng, (30, 4)), random_probs(rng, (30, 4))
    assert lm.dice_loss(a, b).scalar == pytest.approx(lm.dice_loss(b, a).scalar, abs=1e-6)


def test_focal_analytic_values():
    t = np.array([[0.0, 1, 0, 0]])
    half = np.array([[0.5, 0.5, 0, 0]])
    assert lm.focal_loss(t, half, lm.FocalParams(gamma=0)).scalar == pytest.approx(math.log(2), abs=1e-6)
    assert lm.focal_loss(t, half, lm.FocalParams(gamma=2)).scalar == pytest.approx(0.173287, abs=1e-6)
    assert lm.focal_loss(t, t).scalar == pytest.approx(0.0, abs=1e-6)


def test_focal_gamma0_is_cross_entropy():
    rng = np.random.default_rng(3)
    t = lm.one_hot(rng.integers(0, 4, (3, 5)), dtype=np.float64)
    p = random_probs(rng, (3, 5, 4))
    ce = -np.mean(np.sum(t * np.log(p), axis=-1))
    assert lm.focal_loss(t, p, lm.FocalParams(gamma=0)).scalar == pytest.approx(ce, abs=1e-6)


def test_focal_params_validation():
    with pytest.raises(ValueError):
        lm.FocalParams(gamma=-1)
    with pytest.raises(ValueError):
        lm.FocalParams(epsilon=0.6)


def test_total_is_sum():
    rng = np.random.default_rng(4)
    t = lm.one_hot(rng.integers(0, 4, 20), dtype=np.float64)
    p = random_probs(rng, (20, 4))
    d, f = lm.dice_loss(t, p), lm.focal_loss(t, p)
    tot = lm.total_loss(t, p)
    assert tot.scalar == d.scalar + f.scalar
    assert np.array_equal(tot.grad, d.grad + f.grad)
    dice_only = lm.total_loss(t, p, focal_weight=0)
    assert dice_only.scalar == d.scalar
    assert lm.total_loss(t, t).scalar == pytest.approx(0, abs=1e-6)


def test_losses_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        lm.dice_loss(np.zeros((2, 4)), np.zeros((3, 4)))
    with pytest.raises(ShapeMismatch):
        lm.focal_loss(np.zeros((2, 4)), np.zeros((2, 3)))
    with pytest.raises(ShapeMismatch):
        lm.iou_score(np.zeros((1, 2, 4)), np.zeros((1, 3, 4)))


@pytest.mark.parametrize("fn", [lm.dice_loss, lm.focal_loss, lm.total_loss])
def test_loss_gradcheck(fn):
    rng = np.random.default_rng(5)
    t = lm.one_hot(rng.integers(0, 4, (1, 2, 2, 2)), dtype=np.float64)
    p = random_probs(rng, (1, 2, 2, 2, 4))
    # log(P_t) curves sharply at small P_t; extrapolating over two steps removes the h^2 error
    num = numeric_grad(lambda: fn(t, p).scalar, p, h=1e-6, richardson=True)
    assert rel_error(fn(t, p).grad, num) < 1e-6


def test_focal_gradient_zero_when_clipped():
    t = np.array([[1.0, 0, 0, 0]])
    p = np.array([[1.0, 0, 0, 0]])
    assert not lm.focal_loss(t, p).grad.any()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 5))
def test_losses_nonnegative(seed, gamma):
    rng = np.random.default_rng(seed)
    t = lm.one_hot(rng.integers(0, 4, 12), dtype=np.float64)
    p = random_probs(rng, (12, 4))
    assert lm.dice_loss(t, p).scalar >= 0
    assert lm.focal_loss(t, p, lm.FocalParams(gamma)).scalar >= 0


def test_iou_examples():
    m = np.random.default_rng(6).integers(0, 4, (2, 3, 3, 3))
    oh = lm.one_hot(m)
    assert lm.iou_score(oh, oh) == pytest.approx(1.0)

    t = np.zeros((1, 4, 4))
    t[0, :, 0] = 1
    t[0, 0, :] = [0, 0, 1, 0]
    t[0, 1, :] = [0, 0, 1, 0]
    p = np.zeros((1, 4, 4))
    p[0, :, 0] = 1
    p[0, 1, :] = [0, 0, 0.9, 0]
    p[0, 2, :] = [0, 0, 0.9, 0]
    # class 2: truth {0,1}, prediction {1,2}, overlap 1, union 3
    assert lm.iou_per_class(t, p)[0, 2] == pytest.approx(1 / 3, abs=1e-6)

    bg = lm.one_hot(np.zeros((1, 5, 5), int))
    assert lm.iou_score(bg, bg) == pytest.approx(1.0)
    assert lm.iou_score(bg, bg, include_background=False) == pytest.approx(1.0)


def test_iou_threshold_binarizes():
    t = lm.one_hot(np.zeros((1, 3), int))
    p = np.tile([0.45, 0.45, 0.05, 0.05], (1, 3, 1))
    per = lm.iou_per_class(t, p)
    assert per[0, 0] == pytest.approx(1e-6 / (3 + 1e-6))


def test_accuracy():
    m = np.random.default_rng(7).integers(0, 4, (4, 4, 4))
    assert lm.voxel_accuracy(m, lm.one_hot(m)) == 1.0
    assert lm.voxel_accuracy(np.zeros((3, 3), int), np.full((3, 3, 4), 0.25)) == 1.0
    flipped = m.copy().ravel()
    flipped[: flipped.size // 2] = (flipped[: flipped.size // 2] + 1) % 4
    assert lm.voxel_accuracy(m, lm.one_hot(flipped.reshape(m.shape))) == 0.5
    with pytest.raises(ShapeMismatch):
        lm.voxel_accuracy(m, np.zeros((4, 4, 3, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    m = rng.integers(0, 4, (1, 64))
    p = random_probs(rng, (1, 64, 4))
    perm = rng.permutation(64)
    oh = lm.one_hot(m)
    assert lm.iou_score(oh, p) == lm.iou_score(oh[:, perm], p[:, perm])
    assert lm.voxel_accuracy(m, p) == lm.voxel_accuracy(m[:, perm], p[:, perm])
    # strictly monotone per-voxel transform keeps the argmax
    assert lm.voxel_accuracy(m, p) == lm.voxel_accuracy(m, np.exp(3 * p) - 1)
