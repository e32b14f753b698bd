"""Numeric inner-loop kernels, with optional numba acceleration.

Every kernel here exists twice: a pure-numpy implementation
(``*_numpy``) and a numba-jitted twin (``*_jit``). Which family is
active is decided once at import time:

* ``LUNGSAM_NUMBA=0`` (also ``false``/``off``) forces the numpy path;
* anything else uses numba when it is importable, numpy otherwise.

``ACTIVE_BACKEND`` records the decision. Both families stay importable
so the test suite can assert they agree and ``benchmarks/bench_kernels.py``
can time them against each other.
"""

import math
import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def _numba_requested() -> bool:
    flag = os.environ.get("LUNGSAM_NUMBA", "auto").strip().lower()
    return flag not in ("0", "false", "off", "no")


USE_NUMBA = NUMBA_AVAILABLE and _numba_requested()
ACTIVE_BACKEND = "numba" if USE_NUMBA else "numpy"

# Smoothing epsilon in the dice ratio and the probability clamp applied
# before the logarithms of the focal term. The clamp only guards the
# logs; the dice term uses the raw probabilities.
DICE_EPS = 1e-5
PROB_CLIP = 1e-7


# ---------------------------------------------------------------------------
# mask overlap counting (IoU / F1 building block)
# ---------------------------------------------------------------------------


def overlap_counts_numpy(a: np.ndarray, b: np.ndarray):
    """Count (intersection, |a|, |b|) of two binary masks."""
    inter = int(np.count_nonzero(np.logical_and(a, b)))
    return inter, int(np.count_nonzero(a)), int(np.count_nonzero(b))


def _overlap_counts_loop(a, b):
    fa = a.ravel()
    fb = b.ravel()
    inter = 0
    sa = 0
    sb = 0
    for i in range(fa.size):
        av = fa[i] != 0
        bv = fb[i] != 0
        if av:
            sa += 1
        if bv:
            sb += 1
        if av and bv:
            inter += 1
    return inter, sa, sb


overlap_counts_jit = njit(cache=True)(_overlap_counts_loop)


# ---------------------------------------------------------------------------
# weighted dice + focal loss, value and analytic gradient
# ---------------------------------------------------------------------------
#
# value = w_dice * (1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps))
#       + w_focal * mean_i[ -(1-p)^g * t * log(p) - p^g * (1-t) * log(1-p) ]
#
# The gradient of the focal term is taken w.r.t. the clamped probability;
# at clamped pixels this is the usual inner-derivative choice so training
# still receives a signal from saturated predictions.


def dice_focal_value_numpy(probs, target, w_dice, w_focal, gamma):
    inter = float(np.sum(probs * target))
    s = float(np.sum(probs) + np.sum(target))
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (s + DICE_EPS)

    p = np.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)
    focal_px = -((1.0 - p) ** gamma) * target * np.log(p) - (p ** gamma) * (
        1.0 - target
    ) * np.log(1.0 - p)
    focal = float(np.mean(focal_px))
    return w_dice * dice + w_focal * focal


def _dice_focal_value_loop(probs, target, w_dice, w_focal, gamma):
    n = probs.shape[0] * probs.shape[1]
    inter = 0.0
    sp = 0.0
    st = 0.0
    focal = 0.0
    for i in range(probs.shape[0]):
        for j in range(probs.shape[1]):
            pr = probs[i, j]
            t = target[i, j]
            inter += pr * t
            sp += pr
            st += t
            p = min(max(pr, PROB_CLIP), 1.0 - PROB_CLIP)
            focal += -((1.0 - p) ** gamma) * t * math.log(p) - (p ** gamma) * (
                1.0 - t
            ) * math.log(1.0 - p)
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS)
    return w_dice * dice + w_focal * focal / n


dice_focal_value_jit = njit(cache=True)(_dice_focal_value_loop)


def dice_focal_grad_numpy(probs, target, w_dice, w_focal, gamma):
    """Loss value plus d(loss)/d(probs), both computed analytically."""
    n = probs.size
    inter2 = 2.0 * float(np.sum(probs * target)) + DICE_EPS
    s = float(np.sum(probs) + np.sum(target)) + DICE_EPS
    dice = 1.0 - inter2 / s
    # d/dp_i [1 - (2*sum(pt)+eps)/(sum(p)+sum(t)+eps)] = (inter2 - 2*t_i*s)/s^2
    grad_dice = (inter2 - 2.0 * target * s) / (s * s)

    p = np.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)
    logp = np.log(p)
    log1mp = np.log(1.0 - p)
    if gamma == 0.0:
        d_pos = -1.0 / p
        d_neg = 1.0 / (1.0 - p)
        focal_px = -target * logp - (1.0 - target) * log1mp
    else:
        omp_g = (1.0 - p) ** gamma
        p_g = p ** gamma
        d_pos = gamma * (1.0 - p) ** (gamma - 1.0) * logp - omp_g / p
        d_neg = -gamma * p ** (gamma - 1.0) * log1mp + p_g / (1.0 - p)
        focal_px = -omp_g * target * logp - p_g * (1.0 - target) * log1mp
    focal = float(np.mean(focal_px))
    grad_focal = (target * d_pos + (1.0 - target) * d_neg) / n

    value = w_dice * dice + w_focal * focal
    grad = w_dice * grad_dice + w_focal * grad_focal
    return value, grad


def _dice_focal_grad_loop(probs, target, w_dice, w_focal, gamma):
    n = probs.shape[0] * probs.shape[1]
    inter = 0.0
    sp = 0.0
    st = 0.0
    for i in range(probs.shape[0]):
        for j in range(probs.shape[1]):
            inter += probs[i, j] * target[i, j]
            sp += probs[i, j]
            st += target[i, j]
    inter2 = 2.0 * inter + DICE_EPS
    s = sp + st + DICE_EPS

    grad = np.empty_like(probs)
    focal = 0.0
    for i in range(probs.shape[0]):
        for j in range(probs.shape[1]):
            t = target[i, j]
            p = min(max(probs[i, j], PROB_CLIP), 1.0 - PROB_CLIP)
            logp = math.log(p)
            log1mp = math.log(1.0 - p)
            if gamma == 0.0:
                d_pos = -1.0 / p
                d_neg = 1.0 / (1.0 - p)
                focal += -t * logp - (1.0 - t) * log1mp
            else:
                omp_g = (1.0 - p) ** gamma
                p_g = p ** gamma
                d_pos = gamma * (1.0 - p) ** (gamma - 1.0) * logp - omp_g / p
                d_neg = -gamma * p ** (gamma - 1.0) * log1mp + p_g / (1.0 - p)
                focal += -omp_g * t * logp - p_g * (1.0 - t) * log1mp
            g_dice = (inter2 - 2.0 * t * s) / (s * s)
            g_focal = (t * d_pos + (1.0 - t) * d_neg) / n
            grad[i, j] = w_dice * g_dice + w_focal * g_focal

    value = w_dice * (1.0 - inter2 / s) + w_focal * focal / n
    return value, grad


dice_focal_grad_jit = njit(cache=True)(_dice_focal_grad_loop)


# ---------------------------------------------------------------------------
# foreground area per binarization threshold
# ---------------------------------------------------------------------------


def area_per_threshold_numpy(probs, thresholds):
    out = np.empty(len(thresholds), dtype=np.int64)
    for k, t in enumerate(thresholds):
        out[k] = int(np.count_nonzero(probs >= t))
    return out


def _area_per_threshold_loop(probs, thresholds):
    flat = probs.ravel()
    out = np.zeros(thresholds.shape[0], dtype=np.int64)
    for k in range(thresholds.shape[0]):
        t = thresholds[k]
        count = 0
        for i in range(flat.size):
            if flat[i] >= t:
                count += 1
        out[k] = count
    return out


area_per_threshold_jit = njit(cache=True)(_area_per_threshold_loop)


if USE_NUMBA:
    overlap_counts = overlap_counts_jit
    dice_focal_value = dice_focal_value_jit
    dice_focal_grad = dice_focal_grad_jit
    area_per_threshold = area_per_threshold_jit
else:
    overlap_counts = overlap_counts_numpy
    dice_focal_value = dice_focal_value_numpy
    dice_focal_grad = dice_focal_grad_numpy
    area_per_threshold = area_per_threshold_numpy


def warmup():
    """Trigger jit compilation on tiny inputs so later calls are hot."""
    a = np.zeros((2, 2), dtype=np.uint8)
    p = np.full((2, 2), 0.5)
    t = np.zeros((2, 2))
    overlap_counts(a, a)
    dice_focal_value(p, t, 1.0, 1.0, 2.0)
    dice_focal_grad(p, t, 1.0, 1.0, 2.0)
    area_per_threshold(p, np.array([0.5]))
