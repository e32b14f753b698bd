"""Report generation: metric tables, learning-curve/sweep plots, mask panels.

Tables are rendered to Markdown and CSV from a single row source, so the
two files always carry identical numbers, optionally with the published
reference values alongside for diffing. Every number is re-derivable
from the persisted per-image records.
"""

import csv
import logging
import warnings
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

log = logging.getLogger(__name__)

MISSING = "—"

# Published reference results used for side-by-side comparison:
# (F1 mean, F1 std), (IoU mean, IoU std) per (dataset, prompt mode).
ZERO_SHOT_REFERENCE = {
    ("montgomery", "box"): ((0.718, 0.033), (0.586, 0.033)),
    ("montgomery", "points"): ((0.860, 0.013), (0.774, 0.018)),
    ("montgomery", "both"): ((0.848, 0.006), (0.746, 0.007)),
    ("shenzhen", "box"): ((0.782, 0.009), (0.661, 0.013)),
    ("shenzhen", "points"): ((0.726, 0.021), (0.593, 0.026)),
    ("shenzhen", "both"): ((0.863, 0.005), (0.765, 0.008)),
}
FINETUNED_REFERENCE = {
    ("montgomery", "box"): ((0.818, 0.040), (0.707, 0.045)),
    ("montgomery", "points"): ((0.943, 0.007), (0.897, 0.012)),
    ("montgomery", "both"): ((0.876, 0.015), (0.787, 0.023)),
    ("shenzhen", "box"): ((0.797, 0.014), (0.667, 0.024)),
    ("shenzhen", "points"): ((0.915, 0.011), (0.845, 0.018)),
    ("shenzhen", "both"): ((0.845, 0.012), (0.735, 0.018)),
}
# Validation F1 per binarization threshold, rows 0.50..0.70.
THRESHOLD_REFERENCE = {
    "montgomery": {
        "box": (0.828, 0.812, 0.743, 0.596, 0.410),
        "points": (0.898, 0.932, 0.957, 0.960, 0.938),
        "both": (0.894, 0.893, 0.879, 0.835, 0.759),
    },
    "shenzhen": {
        "box": (0.837, 0.127, 0.003, 0.000, 0.000),
        "points": (0.880, 0.918, 0.870, 0.829, 0.789),
        "both": (0.846, 0.782, 0.417, 0.105, 0.005),
    },
}
# Transfer runs, points prompts: (F1, IoU) per (source, target).
TRANSFER_REFERENCE = {
    ("shenzhen", "montgomery"): (0.924, 0.860),
    ("montgomery", "shenzhen"): (0.933, 0.875),
}
# Literature U-Net baseline (F1 mean, std) for the comparison table.
UNET_F1_REFERENCE = {
    "montgomery": (0.973, 0.014),
    "shenzhen": (0.941, 0.047),
}


def fmt_pm(mean, std) -> str:
    return f"{mean:.3f}±{std:.3f}"


class Table:
    """One source of rows rendered identically to Markdown and CSV.

    Missing cells are passed as None and rendered as a dash; each one
    bumps ``warning_count``.
    """

    def __init__(self, title: str, headers):
        self.title = title
        self.headers = list(headers)
        self.rows = []
        self.warning_count = 0

    def add_row(self, *cells):
        row = []
        for c in cells:
            if c is None:
                row.append(MISSING)
                self.warning_count += 1
                warnings.warn(f"table '{self.title}': missing cell", stacklevel=2)
            else:
                row.append(str(c))
        self.rows.append(row)

    def to_markdown(self) -> str:
        lines = [f"### {self.title}", ""]
        lines.append("| " + " | ".join(self.headers) + " |")
        lines.append("|" + "|".join("---" for _ in self.headers) + "|")
        for row in self.rows:
            lines.append("| " + " | ".join(row) + " |")
        return "\n".join(lines) + "\n"

    def save(self, out_dir, stem: str):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.md").write_text(self.to_markdown())
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.headers)
            writer.writerows(self.rows)
        return out_dir / f"{stem}.md", out_dir / f"{stem}.csv"


def summary_table(title: str, dataset: str, summaries: dict, reference=None) -> Table:
    """Prompt-mode rows of F1/IoU mean±std, with optional reference columns.

    ``summaries`` maps prompt mode -> MetricsSummary (None for missing
    cells); ``reference`` is one of the *_REFERENCE dicts.
    """
    headers = ["Prompt", "F1-Score", "IoU"]
    if reference is not None:
        headers += ["F1 (published)", "IoU (published)"]
    table = Table(title, headers)
    for mode in ("box", "points", "both"):
        if mode not in summaries:
            continue
        s = summaries[mode]
        cells = [mode]
        if s is None:
            cells += [None, None]
        else:
            cells += [fmt_pm(s.mean_f1, s.std_f1), fmt_pm(s.mean_iou, s.std_iou)]
        if reference is not None:
            ref = reference.get((dataset, mode))
            if ref is None:
                cells += [None, None]
            else:
                (f1m, f1s), (ioum, ious) = ref
                cells += [fmt_pm(f1m, f1s), fmt_pm(ioum, ious)]
        table.add_row(*cells)
    return table


def sweep_table(title: str, dataset: str, sweep_result, with_reference=True) -> Table:
    headers = ["Threshold"] + list(sweep_result.modes)
    ref = THRESHOLD_REFERENCE.get(dataset) if with_reference else None
    if ref is not None:
        headers += [f"{m} (published)" for m in sweep_result.modes if m in ref]
    table = Table(title, headers)
    ladder = (0.50, 0.55, 0.60, 0.65, 0.70)
    for i, t in enumerate(sweep_result.thresholds):
        cells = [f"{t:.2f}"] + [f"{sweep_result.mean_f1[(m, t)]:.3f}" for m in sweep_result.modes]
        if ref is not None:
            for m in sweep_result.modes:
                if m not in ref:
                    continue
                cells.append(f"{ref[m][i]:.3f}" if t in ladder and i < len(ref[m]) else None)
        table.add_row(*cells)
    return table


def unet_comparison_table(our_f1: dict) -> Table:
    """Best points-prompt F1 vs the literature U-Net baseline.

    ``our_f1`` maps dataset -> (mean, std) or None when not yet run.
    """
    table = Table("Comparison with the U-Net literature baseline (F1)",
                  ["Dataset", "Ours", "U-Net (published)"])
    for dataset, ref in UNET_F1_REFERENCE.items():
        ours = our_f1.get(dataset)
        table.add_row(
            dataset,
            fmt_pm(*ours) if ours else None,
            fmt_pm(*ref),
        )
    return table


def transfer_table(source: str, target: str, summary, within_summary=None) -> Table:
    """Transfer run next to the within-dataset row and published values."""
    table = Table(
        f"Transfer: trained on {source}, tested on {target}",
        ["Metric", f"{source} → {target}", f"{target} → {target}",
         "published transfer", f"published {target} → {target}"],
    )
    ref = TRANSFER_REFERENCE.get((source, target))
    ref_within = FINETUNED_REFERENCE.get((target, "points"))
    table.add_row(
        "F1-Score",
        f"{summary.mean_f1:.3f}",
        f"{within_summary.mean_f1:.3f}" if within_summary else None,
        f"{ref[0]:.3f}" if ref else None,
        f"{ref_within[0][0]:.3f}" if ref_within else None,
    )
    table.add_row(
        "IoU",
        f"{summary.mean_iou:.3f}",
        f"{within_summary.mean_iou:.3f}" if within_summary else None,
        f"{ref[1]:.3f}" if ref else None,
        f"{ref_within[1][0]:.3f}" if ref_within else None,
    )
    return table


# ---------------------------------------------------------------------------
# plots
# ---------------------------------------------------------------------------


def plot_learning_curve(curve, path, title="Fine-tuning learning curve"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    epochs = np.arange(1, len(curve.train_loss) + 1)
    fig, ax1 = plt.subplots(figsize=(7, 4.5))
    ax1.plot(epochs, curve.train_loss, color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("mean train loss", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(epochs, curve.val_f1, color="tab:orange", label="val F1")
    ax2.set_ylabel("validation F1", color="tab:orange")
    ax1.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(sweep_result, path, title="Validation F1 by binarization threshold"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for mode in sweep_result.modes:
        ys = [sweep_result.mean_f1[(mode, t)] for t in sweep_result.thresholds]
        ax.plot(sweep_result.thresholds, ys, marker="o", label=mode)
    ax.set_xlabel("threshold")
    ax.set_ylabel("mean F1")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# best / worst prediction panels
# ---------------------------------------------------------------------------


def _render_panel(sample, probs, threshold, score, path, tag):
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.8))
    for ax in axes:
        ax.imshow(sample.image, cmap="gray", vmin=0, vmax=255)
        ax.set_xticks([])
        ax.set_yticks([])
    axes[0].set_title("image")
    axes[1].contour(sample.mask, levels=[0.5], colors="lime", linewidths=1.2)
    axes[1].set_title("ground truth")
    axes[2].contour((probs >= threshold).astype(float), levels=[0.5], colors="red",
                    linewidths=1.2)
    axes[2].set_title(f"prediction (F1 {score:.3f})")
    fig.suptitle(f"{tag}: {sample.id}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def report_best_worst(samples_map: dict, records, predictions_dir, out_dir,
                      k: int = 1, threshold: float = 0.5):
    """Export panels for the k best and k worst samples by F1.

    Ties break by sample id; k is clamped to the record count with a
    warning. Returns the list of written panel paths; a captions.txt with
    the scores sits next to them.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    predictions_dir = Path(predictions_dir)
    usable = [r for r in records if (predictions_dir / f"{r.sample_id}.npz").is_file()
              and r.sample_id in samples_map]
    if not usable:
        raise ValueError("no records with persisted predictions to render")
    if k > len(usable):
        log.warning("k=%d larger than %d available samples; clamping", k, len(usable))
        k = len(usable)
    ranked = sorted(usable, key=lambda r: (-r.f1, r.sample_id))
    chosen = [("best", r) for r in ranked[:k]] + [("worst", r) for r in ranked[-k:][::-1]]

    captions = []
    paths = []
    for idx, (tag, record) in enumerate(chosen, start=1):
        sample = samples_map[record.sample_id]
        with np.load(predictions_dir / f"{record.sample_id}.npz") as data:
            probs = data["probs"].astype(np.float64)
        panel = out_dir / f"{tag}_{idx:02d}_{record.sample_id}.png"
        _render_panel(sample, probs, record.threshold, record.f1, panel, tag)
        captions.append(
            f"{tag} {record.sample_id}: F1={record.f1:.4f} IoU={record.iou:.4f} "
            f"threshold={record.threshold}"
        )
        paths.append(panel)
    (out_dir / "captions.txt").write_text("\n".join(captions) + "\n")
    return paths
