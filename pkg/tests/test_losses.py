import math

import numpy as np
import pytest

from lungsam.losses import DICE_EPS, PROB_CLIP, dice_focal_loss, dice_focal_loss_grad


def reference_loss(probs, target, w_dice=1.0, w_focal=1.0, gamma=2.0):
    """Longhand scalar evaluation of the two formulas, used as the oracle."""
    probs = np.asarray(probs, dtype=float)
    target = np.asarray(target, dtype=float)
    inter = sp = st = 0.0
    focal = 0.0
    for p, t in zip(probs.ravel(), target.ravel()):
        inter += p * t
        sp += p
        st += t
        pc = min(max(p, PROB_CLIP), 1.0 - PROB_CLIP)
        focal += -((1 - pc) ** gamma) * t * math.log(pc)
        focal += -(pc**gamma) * (1 - t) * math.log(1 - pc)
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS)
    return w_dice * dice + w_focal * focal / probs.size


def test_perfect_prediction_is_near_zero():
    target = np.zeros((8, 8))
    target[2:6, 2:6] = 1.0
    assert dice_focal_loss(target, target) <= 1e-3


def test_inverted_prediction_matches_hand_computation():
    # half-foreground 2x2 mask with probs = 1 - target
    target = np.array([[1.0, 1.0], [0.0, 0.0]])
    probs = 1.0 - target
    expected = reference_loss(probs, target)
    assert dice_focal_loss(probs, target) == pytest.approx(expected, rel=1e-12)
    # and the dice part alone is ~1 for a fully wrong prediction
    dice_only = dice_focal_loss(probs, target, w_dice=1.0, w_focal=0.0)
    assert dice_only == pytest.approx(1.0 - DICE_EPS / (4.0 + DICE_EPS), rel=1e-9)


def test_focal_weight_zero_degenerates_to_dice(rng):
    probs = rng.uniform(0, 1, (6, 6))
    target = (rng.random((6, 6)) > 0.5).astype(float)
    loss = dice_focal_loss(probs, target, w_dice=1.0, w_focal=0.0)
    assert loss == pytest.approx(reference_loss(probs, target, w_focal=0.0), rel=1e-12)


def test_matches_reference_on_random_inputs(rng):
    for gamma in (0.0, 0.5, 1.0, 2.0, 3.0):
        probs = rng.uniform(0, 1, (5, 7))
        target = (rng.random((5, 7)) > 0.4).astype(float)
        w_d, w_f = rng.uniform(0.1, 2.0, size=2)
        got = dice_focal_loss(probs, target, w_dice=w_d, w_focal=w_f, gamma=gamma)
        want = reference_loss(probs, target, w_dice=w_d, w_focal=w_f, gamma=gamma)
        assert got == pytest.approx(want, rel=1e-10)


def test_loss_bounds(rng):
    for _ in range(30):
        probs = rng.uniform(0, 1, (6, 6))
        target = (rng.random((6, 6)) > 0.5).astype(float)
        dice = dice_focal_loss(probs, target, w_dice=1.0, w_focal=0.0)
        focal = dice_focal_loss(probs, target, w_dice=0.0, w_focal=1.0)
        assert 0.0 <= dice <= 1.0
        assert focal >= 0.0


def finite_difference(probs, target, h=1e-6, **kw):
    grad = np.zeros_like(probs)
    for i in range(probs.shape[0]):
        for j in range(probs.shape[1]):
            hi = probs.copy()
            lo = probs.copy()
            hi[i, j] += h
            lo[i, j] -= h
            grad[i, j] = (dice_focal_loss(hi, target, **kw) - dice_focal_loss(lo, target, **kw)) / (2 * h)
    return grad


def test_gradient_matches_finite_differences(rng):
    for trial in range(25):
        gamma = float(rng.choice([0.0, 1.0, 2.0, 3.0]))
        probs = rng.uniform(0.01, 0.99, (3, 3))
        target = (rng.random((3, 3)) > 0.5).astype(float)
        loss, grad = dice_focal_loss_grad(probs, target, gamma=gamma)
        assert loss == pytest.approx(dice_focal_loss(probs, target, gamma=gamma), rel=1e-12)
        fd = finite_difference(probs, target, gamma=gamma)
        rel = np.abs(fd - grad) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-4


def test_shape_mismatch_and_nan_rejected():
    with pytest.raises(ValueError, match="shape"):
        dice_focal_loss(np.zeros((2, 2)), np.zeros((2, 3)))
    bad = np.full((2, 2), 0.5)
    bad[0, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        dice_focal_loss(bad, np.zeros((2, 2)))
