"""Binary-mask metrics, binarization, and per-image record bookkeeping.

IoU is intersection over union of the two pixel sets; F1 is twice the
intersection over the sum of the set sizes. Both are defined as 1.0 when
both masks are empty so the functions are total (that case never occurs
with real lung masks).
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

RECORD_COLUMNS = ["sample_id", "dataset", "prompt_mode", "threshold", "iou", "f1"]


@dataclass
class HardMask:
    pixels: np.ndarray  # uint8, values in {0, 1}
    threshold_used: float


@dataclass
class MetricsRecord:
    sample_id: str
    dataset: str
    prompt_mode: str
    threshold: float
    iou: float
    f1: float


@dataclass
class MetricsSummary:
    """Per-fold means plus their aggregate for one experiment cell."""

    label: str
    fold_iou: list = field(default_factory=list)
    fold_f1: list = field(default_factory=list)

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.fold_iou))

    @property
    def std_iou(self) -> float:
        return float(np.std(self.fold_iou, ddof=1)) if len(self.fold_iou) > 1 else 0.0

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.fold_f1))

    @property
    def std_f1(self) -> float:
        return float(np.std(self.fold_f1, ddof=1)) if len(self.fold_f1) > 1 else 0.0


def _as_mask(m) -> np.ndarray:
    if isinstance(m, HardMask):
        m = m.pixels
    return np.asarray(m)


def _check_shapes(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")


def binarize(probs, threshold: float) -> HardMask:
    """Threshold a probability map; a pixel >= threshold counts as foreground."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    arr = probs.probs if hasattr(probs, "probs") else np.asarray(probs)
    return HardMask(pixels=(arr >= threshold).astype(np.uint8), threshold_used=threshold)


def iou(m_v, m_p) -> float:
    a = _as_mask(m_v)
    b = _as_mask(m_p)
    _check_shapes(a, b)
    inter, sa, sb = kernels.overlap_counts(
        np.ascontiguousarray(a, dtype=np.uint8), np.ascontiguousarray(b, dtype=np.uint8)
    )
    union = sa + sb - inter
    if union == 0:
        return 1.0
    return inter / union


def f1(m_v, m_p) -> float:
    a = _as_mask(m_v)
    b = _as_mask(m_p)
    _check_shapes(a, b)
    inter, sa, sb = kernels.overlap_counts(
        np.ascontiguousarray(a, dtype=np.uint8), np.ascontiguousarray(b, dtype=np.uint8)
    )
    if sa + sb == 0:
        return 1.0
    return 2.0 * inter / (sa + sb)


def foreground_area_by_threshold(probs, thresholds) -> np.ndarray:
    """Foreground pixel count after binarizing at each threshold."""
    arr = probs.probs if hasattr(probs, "probs") else np.asarray(probs)
    return kernels.area_per_threshold(
        np.ascontiguousarray(arr, dtype=np.float64),
        np.asarray(thresholds, dtype=np.float64),
    )


def write_records(path, records):
    """Persist per-image records as CSV (one row per sample/threshold cell)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_COLUMNS)
        for r in records:
            writer.writerow(
                [r.sample_id, r.dataset, r.prompt_mode, repr(r.threshold), repr(r.iou), repr(r.f1)]
            )


def read_records(path):
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            records.append(
                MetricsRecord(
                    sample_id=row["sample_id"],
                    dataset=row["dataset"],
                    prompt_mode=row["prompt_mode"],
                    threshold=float(row["threshold"]),
                    iou=float(row["iou"]),
                    f1=float(row["f1"]),
                )
            )
    return records


def summarize_folds(label: str, per_fold_records) -> MetricsSummary:
    """Aggregate per-fold record lists into fold means and their spread.

    ``per_fold_records`` is a list (one entry per fold) of MetricsRecord
    lists. Records are averaged within a fold first; the summary mean/std
    is then taken across the fold means (sample std, ddof=1).
    """
    summary = MetricsSummary(label=label)
    for records in per_fold_records:
        if not records:
            raise ValueError(f"empty fold in summary '{label}'")
        ordered = sorted(records, key=lambda r: r.sample_id)
        summary.fold_iou.append(float(np.mean([r.iou for r in ordered])))
        summary.fold_f1.append(float(np.mean([r.f1 for r in ordered])))
    return summary
