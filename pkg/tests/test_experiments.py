import numpy as np
import pytest

from lungsam.datasets import make_fold_plan, samples_by_id
from lungsam.errors import FoldError
from lungsam.experiments import (
    PromptOptions,
    cross_dataset_eval,
    cross_validate,
    evaluate_samples,
    threshold_sweep,
    zero_shot_eval,
)
from lungsam.metrics import f1
from lungsam.models import SoftMask, StubSegmenter
from lungsam.prompts import build_prompts, compute_mean_image
from lungsam.train import TrainConfig


class FixedModel:
    """Predicts the same soft mask for every input."""

    def __init__(self, probs):
        self.probs = probs

    def predict(self, sample, prompts):
        return SoftMask(self.probs.copy(), sample.id, prompts.mode)


class EchoModel(FixedModel):
    """Predicts a blur of the ground truth; quality varies per sample."""

    def __init__(self, blur=0.3):
        self.blur = blur

    def predict(self, sample, prompts):
        rng = np.random.default_rng(abs(hash(sample.id)) % (2**32))
        probs = np.clip(
            sample.mask * (1 - self.blur) + rng.uniform(0, self.blur * 1.8, (256, 256)),
            0.0, 1.0,
        )
        return SoftMask(probs, sample.id, prompts.mode)


@pytest.fixture(scope="module")
def holdout(synth_samples):
    return make_fold_plan(synth_samples, "holdout_60_20_20", seed=42)


@pytest.fixture(scope="module")
def kfold(synth_samples):
    return make_fold_plan(synth_samples, "kfold_5", seed=42)


@pytest.fixture(scope="module")
def val_samples(synth_samples, holdout):
    by_id = samples_by_id(synth_samples)
    return [by_id[i] for i in holdout.role_ids("val")]


@pytest.fixture(scope="module")
def point_prompts(synth_samples, holdout):
    mean = compute_mean_image(synth_samples, holdout)
    return build_prompts(synth_samples, mean, "points")


def test_constant_point_six_soft_mask_steps_at_0_60(val_samples, point_prompts):
    # probs 0.6 everywhere: the binarized mask is identical for
    # thresholds <= 0.60 and empty above, so F1 steps accordingly
    model = FixedModel(np.full((256, 256), 0.6))
    sweep = threshold_sweep(model, val_samples, {"points": point_prompts})
    f_at = {t: sweep.mean_f1[("points", t)] for t in sweep.thresholds}
    assert f_at[0.50] == f_at[0.55] == f_at[0.60]
    assert f_at[0.65] == f_at[0.70] == 0.0


def test_sweep_best_cell(val_samples, point_prompts):
    model = EchoModel()
    sweep = threshold_sweep(model, val_samples, {"points": point_prompts})
    mode, threshold, score = sweep.best
    assert mode == "points"
    assert score == max(sweep.mean_f1.values())
    assert sweep.mean_f1[(mode, threshold)] == score
    rows = list(sweep.rows())
    assert len(rows) == 5 and all("points" in r for r in rows)


def test_sweep_requires_validation_samples(point_prompts):
    with pytest.raises(ValueError, match="non-empty"):
        threshold_sweep(FixedModel(np.zeros((256, 256))), [], {"points": point_prompts})


def test_evaluate_samples_records_and_saves(tmp_path, val_samples, point_prompts):
    model = EchoModel()
    records = evaluate_samples(
        model, val_samples, point_prompts, 0.5, "points", save_dir=tmp_path
    )
    assert [r.sample_id for r in records] == sorted(s.id for s in val_samples)
    for r in records:
        assert 0 <= r.iou <= r.f1 <= 1
        assert (tmp_path / f"{r.sample_id}.npz").is_file()
    # spot-check one record against a direct computation
    sample = val_samples[0]
    probs = model.predict(sample, point_prompts[sample.id]).probs
    expect = f1(sample.mask, (probs >= 0.5).astype(np.uint8))
    got = next(r for r in records if r.sample_id == sample.id)
    assert got.f1 == pytest.approx(expect, abs=1e-12)


def test_cross_validate_aggregation_matches_hand_recompute(synth_samples, kfold):
    cfg = TrainConfig(learning_rate=0.05, epochs=1, batch_size=4, seed=1)
    opts = PromptOptions(mode="points", jitter=0)
    summary, per_fold = cross_validate(
        StubSegmenter, synth_samples, kfold, cfg, opts, threshold=0.5
    )
    assert len(per_fold) == 5
    # folds cover exactly the plan's test ids
    for fold in range(5):
        assert [r.sample_id for r in per_fold[fold]] == kfold.fold_ids(fold)
    hand_means = [float(np.mean([r.f1 for r in fold])) for fold in per_fold]
    assert summary.fold_f1 == pytest.approx(hand_means, abs=1e-12)
    assert summary.mean_f1 == pytest.approx(np.mean(hand_means), abs=1e-12)
    assert summary.std_f1 == pytest.approx(np.std(hand_means, ddof=1), abs=1e-12)


def test_cross_validate_requires_kfold_plan(synth_samples, holdout):
    cfg = TrainConfig(epochs=1)
    with pytest.raises(FoldError, match="kfold_5"):
        cross_validate(StubSegmenter, synth_samples, holdout, cfg, PromptOptions())


def test_zero_shot_covers_modes_and_folds(synth_samples, kfold):
    model = StubSegmenter()
    results = zero_shot_eval(
        model, synth_samples, kfold, ("box", "points"), PromptOptions(), threshold=0.5
    )
    assert set(results) == {"box", "points"}
    for mode, (summary, per_fold) in results.items():
        assert len(summary.fold_f1) == 5
        assert len(per_fold) == 5
        total = sum(len(fold) for fold in per_fold)
        assert total == len(synth_samples)
        for fold in per_fold:
            assert all(r.prompt_mode == mode for r in fold)


def test_cross_dataset_matches_direct_eval_path(synth_samples, holdout):
    # transferring a model onto its own dataset must equal the plain
    # evaluation path (same code, same prompts)
    model = EchoModel()
    opts = PromptOptions(mode="points")
    summary, records = cross_dataset_eval(model, synth_samples, holdout, opts, threshold=0.5)
    by_id = samples_by_id(synth_samples)
    test_samples = [by_id[i] for i in holdout.role_ids("test")]
    prompts = opts.build(test_samples, holdout.role_ids("train"),
                         training=False, universe=synth_samples)
    direct = evaluate_samples(model, test_samples, prompts, 0.5, "points")
    assert records == direct
    assert summary.mean_f1 == pytest.approx(np.mean([r.f1 for r in direct]), abs=1e-12)


def test_cross_dataset_rejects_non_point_prompts(synth_samples, holdout):
    with pytest.raises(ValueError, match="point"):
        cross_dataset_eval(
            EchoModel(), synth_samples, holdout, PromptOptions(mode="box")
        )
