"""Toolkit for prompt-driven lung segmentation on chest X-rays.

Loads the Montgomery/Shenzhen datasets, builds point/box prompts,
fine-tunes only the mask decoder of a promptable segmentation model,
and evaluates with threshold sweeps, k-fold cross-validation, and
cross-dataset transfer runs.
"""

__version__ = "0.1.0"

from .datasets import ImageSample, FoldPlan, load_montgomery, load_shenzhen, make_fold_plan
from .losses import dice_focal_loss, dice_focal_loss_grad
from .metrics import HardMask, MetricsRecord, MetricsSummary, binarize, f1, iou
from .prompts import MeanImage, PromptSet, compute_mean_image, extract_box, extract_points

__all__ = [
    "ImageSample",
    "FoldPlan",
    "load_montgomery",
    "load_shenzhen",
    "make_fold_plan",
    "dice_focal_loss",
    "dice_focal_loss_grad",
    "HardMask",
    "MetricsRecord",
    "MetricsSummary",
    "binarize",
    "f1",
    "iou",
    "MeanImage",
    "PromptSet",
    "compute_mean_image",
    "extract_box",
    "extract_points",
]
