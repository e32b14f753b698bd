"""Evaluation protocols: threshold sweep, k-fold CV, zero-shot, transfer.

All protocols share one rule: point prompts come from a mean image built
exclusively from samples with the training role of the governing plan
(for k-fold protocols, the non-test folds), and evaluation boxes are
tight (jitter 0) while training boxes keep their configured jitter.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datasets import samples_by_id
from .errors import FoldError
from .metrics import MetricsRecord, binarize, f1, iou, summarize_folds
from .prompts import build_prompts, compute_mean_image
from .train import carve_validation, train

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.50, 0.55, 0.60, 0.65, 0.70)


@dataclass
class PromptOptions:
    mode: str = "points"
    level: float = 0.5
    k_per_component: int = 3
    jitter: int = 20
    seed: int = 42
    single_box: bool = False

    def build(self, samples, train_ids, *, training: bool, universe=None) -> dict:
        """Prompts for ``samples``; the mean image sees only ``train_ids``
        (looked up in ``universe`` when the targets don't contain them).
        Evaluation prompts use tight boxes (jitter 0)."""
        mean = None
        if self.mode in ("points", "both"):
            pool = [s for s in (universe or samples) if s.id in set(train_ids)]
            mean = compute_mean_image(pool, train_ids)
        jitter = self.jitter if training else 0
        return build_prompts(
            samples,
            mean,
            self.mode,
            k_per_component=self.k_per_component,
            level=self.level,
            jitter=jitter,
            seed=self.seed,
            single_box=self.single_box,
        )


def evaluate_samples(model, samples, prompts: dict, threshold: float, mode: str,
                     save_dir=None) -> list:
    """Per-image IoU/F1 records at one threshold, sorted by sample id.

    When ``save_dir`` is given, each soft mask is persisted as an npz so
    reports can be regenerated without re-running the model.
    """
    if save_dir is not None:
        save_dir = Path(save_dir)
        save_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for sample in sorted(samples, key=lambda s: s.id):
        soft = model.predict(sample, prompts[sample.id])
        hard = binarize(soft.probs, threshold)
        records.append(
            MetricsRecord(
                sample_id=sample.id,
                dataset=sample.dataset,
                prompt_mode=mode,
                threshold=threshold,
                iou=iou(sample.mask, hard),
                f1=f1(sample.mask, hard),
            )
        )
        if save_dir is not None:
            np.savez(
                save_dir / f"{sample.id}.npz",
                probs=soft.probs.astype(np.float32),
                prompt_mode=np.asarray(mode),
            )
    return records


@dataclass
class SweepResult:
    thresholds: list
    modes: list
    mean_f1: dict = field(default_factory=dict)  # (mode, threshold) -> float

    @property
    def best(self):
        """(mode, threshold, f1) of the best cell; ties go to the lower
        threshold, then the mode order given."""
        best = None
        for mode in self.modes:
            for t in self.thresholds:
                score = self.mean_f1[(mode, t)]
                if best is None or score > best[2]:
                    best = (mode, t, score)
        return best

    def rows(self):
        for t in self.thresholds:
            yield {"threshold": t, **{m: self.mean_f1[(m, t)] for m in self.modes}}


def threshold_sweep(model, val_samples, prompts_by_mode: dict,
                    thresholds=DEFAULT_THRESHOLDS) -> SweepResult:
    """Mean validation F1 per (prompt mode, threshold) cell.

    Each sample is predicted once per mode; binarization is swept over
    the fixed threshold ladder.
    """
    if not val_samples:
        raise ValueError("threshold sweep needs a non-empty validation set")
    thresholds = list(thresholds)
    modes = list(prompts_by_mode)
    result = SweepResult(thresholds=thresholds, modes=modes)
    for mode, prompts in prompts_by_mode.items():
        scores = {t: [] for t in thresholds}
        for sample in sorted(val_samples, key=lambda s: s.id):
            soft = model.predict(sample, prompts[sample.id])
            for t in thresholds:
                scores[t].append(f1(sample.mask, binarize(soft.probs, t)))
        for t in thresholds:
            result.mean_f1[(mode, t)] = float(np.mean(scores[t]))
    return result


def cross_validate(model_factory, samples, plan, cfg, prompt_opts: PromptOptions,
                   threshold: float = 0.5, save_dir=None):
    """5-fold CV: train on four folds, test on the fifth, aggregate.

    Any failing fold propagates (a partial summary would be misleading).
    Returns (MetricsSummary, per-fold record lists).
    """
    if plan.scheme != "kfold_5":
        raise FoldError(f"cross-validation needs a kfold_5 plan, got {plan.scheme}")
    by_id = samples_by_id(samples)
    all_ids = sorted(by_id)
    per_fold_records = []
    for fold in range(plan.n_folds):
        test_ids = plan.fold_ids(fold)
        pool = [i for i in all_ids if i not in set(test_ids)]
        split = carve_validation(pool, fraction=0.2, seed=cfg.seed + fold)

        train_val_samples = [by_id[i] for i in pool]
        train_prompts = prompt_opts.build(train_val_samples, split.train_ids, training=True)
        model = model_factory()
        train(model, train_val_samples, split, train_prompts, cfg)

        test_samples = [by_id[i] for i in test_ids]
        eval_prompts = prompt_opts.build(
            test_samples, split.train_ids, training=False, universe=samples
        )
        fold_dir = None if save_dir is None else Path(save_dir) / f"fold{fold}"
        records = evaluate_samples(
            model, test_samples, eval_prompts, threshold, prompt_opts.mode, save_dir=fold_dir
        )
        per_fold_records.append(records)
        log.info(
            "fold %d: mean F1 %.4f over %d samples",
            fold,
            float(np.mean([r.f1 for r in records])),
            len(records),
        )
    label = f"cv/{plan.dataset}/{prompt_opts.mode}/t{threshold}"
    return summarize_folds(label, per_fold_records), per_fold_records


def zero_shot_eval(model, samples, plan, prompt_modes, prompt_opts: PromptOptions,
                   threshold: float = 0.5):
    """Evaluate original (untrained) weights on each CV fold, per prompt mode.

    Mirrors the CV protocol without the training step: for each fold the
    mean image is built from the non-test folds only.
    """
    if plan.scheme != "kfold_5":
        raise FoldError(f"zero-shot protocol needs a kfold_5 plan, got {plan.scheme}")
    by_id = samples_by_id(samples)
    all_ids = sorted(by_id)
    out = {}
    for mode in prompt_modes:
        opts = replace(prompt_opts, mode=mode)
        per_fold_records = []
        for fold in range(plan.n_folds):
            test_ids = plan.fold_ids(fold)
            train_ids = [i for i in all_ids if i not in set(test_ids)]
            test_samples = [by_id[i] for i in test_ids]
            prompts = opts.build(test_samples, train_ids, training=False, universe=samples)
            records = evaluate_samples(model, test_samples, prompts, threshold, mode)
            per_fold_records.append(records)
        label = f"zeroshot/{plan.dataset}/{mode}/t{threshold}"
        out[mode] = (summarize_folds(label, per_fold_records), per_fold_records)
    return out


def cross_dataset_eval(trained_model, samples_b, plan_b, prompt_opts: PromptOptions,
                       threshold: float = 0.5, save_dir=None):
    """Test a model fine-tuned on dataset A against dataset B's test role.

    Points-only by design; the points come from B's own training-role
    mean image (a foreign mean would misplace the lungs).
    """
    if prompt_opts.mode != "points":
        raise ValueError("cross-dataset transfer is evaluated with point prompts only")
    by_id = samples_by_id(samples_b)
    train_ids = plan_b.role_ids("train")
    test_samples = [by_id[i] for i in plan_b.role_ids("test")]
    prompts = prompt_opts.build(test_samples, train_ids, training=False, universe=samples_b)
    records = evaluate_samples(
        trained_model, test_samples, prompts, threshold, prompt_opts.mode, save_dir=save_dir
    )
    label = f"transfer/to-{plan_b.dataset}/points/t{threshold}"
    return summarize_folds(label, [records]), records
