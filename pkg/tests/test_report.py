import csv

import numpy as np
import pytest

from lungsam.datasets import samples_by_id
from lungsam.experiments import SweepResult
from lungsam.metrics import MetricsRecord, MetricsSummary
from lungsam.report import (
    Table,
    plot_learning_curve,
    plot_sweep,
    report_best_worst,
    summary_table,
    sweep_table,
    transfer_table,
    unet_comparison_table,
)
from lungsam.train import LearningCurve


def test_markdown_and_csv_carry_identical_numbers(tmp_path):
    table = Table("demo", ["a", "b"])
    table.add_row("0.123", "0.456")
    table.add_row("0.789", "1.000")
    md_path, csv_path = table.save(tmp_path, "demo")
    md = md_path.read_text()
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    for row in rows[1:]:
        for cell in row:
            assert cell in md


def test_missing_cells_render_as_dash_with_warning(tmp_path):
    table = Table("demo", ["a", "b"])
    with pytest.warns(UserWarning, match="missing cell"):
        table.add_row("x", None)
    assert table.warning_count == 1
    assert "—" in table.to_markdown()


def test_summary_table_includes_reference_columns():
    summary = MetricsSummary(label="x", fold_f1=[0.9, 0.92], fold_iou=[0.8, 0.82])
    table = summary_table(
        "demo", "montgomery", {"points": summary, "box": None},
        reference={("montgomery", "points"): ((0.943, 0.007), (0.897, 0.012))},
    )
    md = table.to_markdown()
    assert "0.943±0.007" in md and "0.910±" in md
    assert table.warning_count >= 2  # the empty box row


def test_unet_comparison_table_has_literature_constants():
    table = unet_comparison_table({"montgomery": (0.95, 0.01)})
    md = table.to_markdown()
    assert "0.973±0.014" in md and "0.941±0.047" in md
    assert "0.950±0.010" in md


def test_transfer_table_with_reference():
    summary = MetricsSummary(label="t", fold_f1=[0.91], fold_iou=[0.84])
    within = MetricsSummary(label="w", fold_f1=[0.93], fold_iou=[0.86])
    table = transfer_table("montgomery", "shenzhen", summary, within)
    md = table.to_markdown()
    assert "0.933" in md and "0.910" in md and "0.930" in md


def test_sweep_table_and_plot(tmp_path):
    result = SweepResult(thresholds=[0.50, 0.55, 0.60, 0.65, 0.70], modes=["points"])
    for i, t in enumerate(result.thresholds):
        result.mean_f1[("points", t)] = 0.9 - 0.05 * i
    table = sweep_table("demo", "montgomery", result)
    md = table.to_markdown()
    assert "0.900" in md and "0.960" in md  # ours and the published column
    path = plot_sweep(result, tmp_path / "sweep.png")
    assert path.stat().st_size > 0


def test_learning_curve_plot(tmp_path):
    curve = LearningCurve(train_loss=[1.0, 0.6, 0.4], val_f1=[0.2, 0.5, 0.7])
    path = plot_learning_curve(curve, tmp_path / "curve.png")
    assert path.stat().st_size > 0


def _fake_predictions(tmp_path, samples, scores):
    records = []
    for sample, score in zip(samples, scores):
        probs = sample.mask * score
        np.savez(tmp_path / f"{sample.id}.npz", probs=probs.astype(np.float32))
        records.append(
            MetricsRecord(sample.id, "montgomery", "points", 0.5, score * 0.9, score)
        )
    return records


def test_best_worst_panels(tmp_path, synth_samples):
    pred_dir = tmp_path / "preds"
    pred_dir.mkdir()
    out_dir = tmp_path / "panels"
    chosen = synth_samples[:5]
    scores = [0.91, 0.85, 0.99, 0.40, 0.72]
    records = _fake_predictions(pred_dir, chosen, scores)
    paths = report_best_worst(samples_by_id(chosen), records, pred_dir, out_dir, k=1)
    assert len(paths) == 2
    names = [p.name for p in paths]
    assert any("best" in n and chosen[2].id in n for n in names)  # F1 0.99
    assert any("worst" in n and chosen[3].id in n for n in names)  # F1 0.40
    captions = (out_dir / "captions.txt").read_text()
    assert "0.9900" in captions and "0.4000" in captions


def test_best_worst_clamps_k_and_breaks_ties_by_id(tmp_path, synth_samples, caplog):
    pred_dir = tmp_path / "preds"
    pred_dir.mkdir()
    chosen = synth_samples[:3]
    records = _fake_predictions(pred_dir, chosen, [0.8, 0.8, 0.8])
    with caplog.at_level("WARNING"):
        paths = report_best_worst(
            samples_by_id(chosen), records, pred_dir, tmp_path / "p", k=10
        )
    assert "clamping" in caplog.text
    assert len(paths) == 6  # 3 best + 3 worst (k clamped to 3)
    best_first = paths[0].name
    assert chosen[0].id in best_first  # tie broken by sample id order
