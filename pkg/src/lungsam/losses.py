"""Weighted dice + focal training objective.

loss = w_dice * L_dice + w_focal * L_focal with

    L_dice  = 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps),  eps = 1e-5
    L_focal = mean_i[ -(1-p_i)^gamma * t_i * log(p_i)
                      - p_i^gamma * (1-t_i) * log(1-p_i) ]

Probabilities are clamped to [1e-7, 1-1e-7] before the logs. The
analytic gradient lives next to the value so the training loop can stay
backend-agnostic (numpy stub and torch adapters both consume dL/dp).
"""

import numpy as np

from . import kernels
from .kernels import DICE_EPS, PROB_CLIP  # noqa: F401  (re-exported constants)


def _prepare(probs, target):
    probs = np.asarray(probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if probs.shape != target.shape:
        raise ValueError(f"shape mismatch: probs {probs.shape} vs target {target.shape}")
    if not np.all(np.isfinite(probs)):
        raise ValueError("probs contain non-finite values")
    return np.ascontiguousarray(probs), np.ascontiguousarray(target)


def dice_focal_loss(probs, target, w_dice=1.0, w_focal=1.0, gamma=2.0) -> float:
    probs, target = _prepare(probs, target)
    return float(
        kernels.dice_focal_value(probs, target, float(w_dice), float(w_focal), float(gamma))
    )


def dice_focal_loss_grad(probs, target, w_dice=1.0, w_focal=1.0, gamma=2.0):
    """Return (loss, dloss/dprobs) for one probability map."""
    probs, target = _prepare(probs, target)
    value, grad = kernels.dice_focal_grad(
        probs, target, float(w_dice), float(w_focal), float(gamma)
    )
    return float(value), grad
