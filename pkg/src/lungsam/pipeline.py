"""Stage orchestration for full experiment runs.

Each stage records its completion in ``<run_dir>/stages.json``; re-running
a config skips completed stages unless forced, so a finished run is
idempotent. A failing stage leaves a ``FAILED`` marker naming it.
"""

import json
import logging
import time
from pathlib import Path

from .config import ExperimentConfig, write_snapshot
from .datasets import (
    FoldPlan,
    load_cache,
    load_dataset,
    make_fold_plan,
    samples_by_id,
    save_cache,
)
from .errors import LungSamError
from .experiments import (
    PromptOptions,
    cross_dataset_eval,
    cross_validate,
    evaluate_samples,
    threshold_sweep,
    zero_shot_eval,
)
from .metrics import summarize_folds, write_records
from .models import load_model
from .prompts import read_prompt_manifest, write_prompt_manifest
from .report import (
    FINETUNED_REFERENCE,
    ZERO_SHOT_REFERENCE,
    plot_learning_curve,
    plot_sweep,
    report_best_worst,
    summary_table,
    sweep_table,
    transfer_table,
    unet_comparison_table,
)
from .train import ADAM_BETAS, ADAM_EPS, LearningCurve, grid_search, save_grid_table, train

log = logging.getLogger(__name__)


def _plan_path(cache_dir, scheme: str, seed: int) -> Path:
    return Path(cache_dir) / f"plan_{scheme}_seed{seed}.json"


def ensure_plans(samples, cache_dir, seed: int, force: bool = False):
    """Write (or reuse) the holdout and 5-fold plans next to the cache."""
    plans = {}
    for scheme in ("holdout_60_20_20", "kfold_5"):
        path = _plan_path(cache_dir, scheme, seed)
        if path.is_file() and not force:
            plans[scheme] = FoldPlan.load(path)
        else:
            plans[scheme] = make_fold_plan(samples, scheme, seed=seed)
            plans[scheme].save(path)
    return plans


def _summary_payload(summary, extra=None) -> dict:
    payload = {
        "label": summary.label,
        "fold_f1": summary.fold_f1,
        "fold_iou": summary.fold_iou,
        "mean_f1": summary.mean_f1,
        "std_f1": summary.std_f1,
        "mean_iou": summary.mean_iou,
        "std_iou": summary.std_iou,
    }
    payload.update(extra or {})
    return payload


class Pipeline:
    """Runs the configured stages in order against one dataset."""

    def __init__(self, cfg: ExperimentConfig, force: bool = False):
        self.cfg = cfg
        self.force = force
        self.run_dir = Path(cfg.run_dir)
        self.samples = None
        self.plans = None

    # -- stage bookkeeping --------------------------------------------------

    @property
    def _stages_path(self) -> Path:
        return self.run_dir / "stages.json"

    def _done(self) -> dict:
        if self._stages_path.is_file():
            return json.loads(self._stages_path.read_text())
        return {}

    def _mark(self, stage: str, outputs):
        done = self._done()
        done[stage] = {"completed_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
                       "outputs": [str(o) for o in outputs]}
        self._stages_path.write_text(json.dumps(done, indent=1, sort_keys=True))

    # -- shared lazily-loaded inputs -----------------------------------------

    def _ensure_data(self):
        if self.samples is None:
            self.samples = load_cache(self.cfg.cache_dir)
            self.plans = ensure_plans(self.samples, self.cfg.cache_dir, self.cfg.seed)
        return self.samples

    def _holdout(self):
        self._ensure_data()
        return self.plans["holdout_60_20_20"]

    def _kfold(self):
        self._ensure_data()
        return self.plans["kfold_5"]

    def _load_backend(self):
        return load_model(
            self.cfg.model_backend,
            device=self.cfg.device,
            checkpoint_path=self.cfg.checkpoint or None,
        )

    def _finetuned_model(self):
        model = self._load_backend()
        ckpt = self.run_dir / "train" / "best_decoder.npz"
        restored = ckpt.is_file()
        if restored:
            model.load_trainable(ckpt)
            model.sync_trainable()
        return model, restored

    def _prompt_manifest(self, kind: str) -> Path:
        return self.run_dir / "prompts" / f"{self.cfg.prompts.mode}_{kind}.jsonl"

    # -- stages ----------------------------------------------------------------

    def stage_prepare(self):
        cache = Path(self.cfg.cache_dir)
        manifest = cache / "manifest.txt"
        if manifest.is_file() and not self.force:
            samples = load_cache(cache)
            log.info("prepare: reusing cache with %d samples", len(samples))
        else:
            samples = load_dataset(self.cfg.dataset, self.cfg.data_root)
            save_cache(samples, cache)
            log.info("prepare: cached %d samples to %s", len(samples), cache)
        self.samples = samples
        self.plans = ensure_plans(samples, cache, self.cfg.seed, force=self.force)
        return [manifest]

    def stage_prompts(self):
        samples = self._ensure_data()
        plan = self._holdout()
        opts = self.cfg.prompts
        train_ids = plan.role_ids("train")
        outputs = []
        for kind, training in (("train", True), ("eval", False)):
            prompts = opts.build(samples, train_ids, training=training)
            path = self._prompt_manifest(kind)
            write_prompt_manifest(path, prompts)
            outputs.append(path)
        return outputs

    def stage_finetune(self):
        samples = self._ensure_data()
        plan = self._holdout()
        prompts = read_prompt_manifest(self._prompt_manifest("train"))
        out_dir = self.run_dir / "train"
        out_dir.mkdir(parents=True, exist_ok=True)

        train_cfg = self.cfg.train
        if self.cfg.grid_search:
            best_cfg, table = grid_search(
                self._load_backend, samples, plan, prompts, train_cfg
            )
            save_grid_table(out_dir / "grid_table.csv", table)
            log.info(
                "grid search winner: lr=%g wd=%g",
                best_cfg.learning_rate, best_cfg.weight_decay,
            )
            train_cfg = best_cfg

        model = self._load_backend()
        n_total, n_trainable = model.parameter_census()
        _, curve = train(model, samples, plan, prompts, train_cfg, run_dir=out_dir)
        meta = {
            "backend": self.cfg.model_backend,
            "n_parameters": n_total,
            "n_trainable": n_trainable,
            "adam_betas": list(ADAM_BETAS),
            "adam_eps": ADAM_EPS,
            "grid_search": self.cfg.grid_search,
            "train": {k: getattr(train_cfg, k) for k in (
                "learning_rate", "weight_decay", "epochs", "batch_size",
                "w_dice", "w_focal", "focal_gamma", "prompt_mode", "seed")},
            "final_train_loss": curve.train_loss[-1],
            "best_val_f1": max(curve.val_f1),
        }
        (out_dir / "train_meta.json").write_text(json.dumps(meta, indent=1))
        return [out_dir / "learning_curve.csv", out_dir / "best_decoder.npz"]

    def stage_sweep(self):
        samples = self._ensure_data()
        plan = self._holdout()
        by_id = samples_by_id(samples)
        val_samples = [by_id[i] for i in plan.role_ids("val")]
        prompts = read_prompt_manifest(self._prompt_manifest("eval"))
        model, finetuned = self._finetuned_model()
        result = threshold_sweep(
            model, val_samples, {self.cfg.prompts.mode: prompts},
            thresholds=self.cfg.eval.thresholds,
        )
        out_dir = self.run_dir / "sweep"
        out_dir.mkdir(parents=True, exist_ok=True)
        mode, best_threshold, best_f1 = result.best
        payload = {
            "best_threshold": best_threshold,
            "best_mode": mode,
            "best_f1": best_f1,
            "finetuned_weights": finetuned,
            "cells": [
                {"mode": m, "threshold": t, "mean_f1": v}
                for (m, t), v in sorted(result.mean_f1.items())
            ],
        }
        (out_dir / "sweep.json").write_text(json.dumps(payload, indent=1))
        table = sweep_table(
            f"Validation F1 by threshold ({self.cfg.dataset})", self.cfg.dataset, result
        )
        table.save(out_dir, "threshold_table")
        plot_sweep(result, out_dir / "sweep.png")
        return [out_dir / "sweep.json"]

    def _eval_threshold(self):
        sweep_path = self.run_dir / "sweep" / "sweep.json"
        if self.cfg.eval.use_sweep_threshold and sweep_path.is_file():
            return json.loads(sweep_path.read_text())["best_threshold"], "sweep"
        return self.cfg.eval.threshold, "config"

    def stage_eval(self):
        samples = self._ensure_data()
        threshold, threshold_source = self._eval_threshold()
        protocol = self.cfg.eval.protocol
        opts = self.cfg.prompts
        out_dir = self.run_dir / "eval"
        out_dir.mkdir(parents=True, exist_ok=True)
        predictions = self.run_dir / "predictions"

        if protocol == "holdout":
            plan = self._holdout()
            by_id = samples_by_id(samples)
            test_samples = [by_id[i] for i in plan.role_ids("test")]
            prompts = read_prompt_manifest(self._prompt_manifest("eval"))
            model, finetuned = self._finetuned_model()
            records = evaluate_samples(
                model, test_samples, prompts, threshold, opts.mode, save_dir=predictions
            )
            label = f"holdout/{self.cfg.dataset}/{opts.mode}/t{threshold}"
            summary = summarize_folds(label, [records])
            all_records = records
            payload = _summary_payload(summary)
        elif protocol == "cv":
            plan = self._kfold()
            summary, per_fold = cross_validate(
                self._load_backend, samples, plan, self.cfg.train, opts,
                threshold=threshold, save_dir=predictions,
            )
            all_records = [r for fold in per_fold for r in fold]
            finetuned = True
            payload = _summary_payload(summary)
        elif protocol == "zeroshot":
            plan = self._kfold()
            model = self._load_backend()
            results = zero_shot_eval(
                model, samples, plan, ("box", "points", "both"), opts, threshold=threshold
            )
            all_records = [
                r for _, per_fold in results.values() for fold in per_fold for r in fold
            ]
            finetuned = False
            payload = {
                mode: _summary_payload(summary) for mode, (summary, _) in results.items()
            }
        else:
            raise LungSamError(f"unknown eval protocol '{protocol}'")

        payload = {
            "protocol": protocol,
            "prompt_mode": opts.mode,
            "threshold": threshold,
            "threshold_source": threshold_source,
            "finetuned_weights": finetuned,
            "summary": payload,
        }
        (out_dir / "summary.json").write_text(json.dumps(payload, indent=1))
        write_records(out_dir / "records.csv", all_records)
        return [out_dir / "summary.json", out_dir / "records.csv"]

    def stage_report(self):
        from .metrics import MetricsSummary, read_records

        out_dir = self.run_dir / "report"
        out_dir.mkdir(parents=True, exist_ok=True)
        outputs = []

        curve_path = self.run_dir / "train" / "learning_curve.csv"
        if curve_path.is_file():
            curve = LearningCurve.load(curve_path)
            outputs.append(
                plot_learning_curve(
                    curve, out_dir / "learning_curve.png",
                    title=f"Learning curve ({self.cfg.dataset}, {self.cfg.prompts.mode})",
                )
            )

        summary_path = self.run_dir / "eval" / "summary.json"
        if summary_path.is_file():
            payload = json.loads(summary_path.read_text())
            protocol = payload["protocol"]
            reference = ZERO_SHOT_REFERENCE if protocol == "zeroshot" else FINETUNED_REFERENCE

            def rebuild(d):
                return MetricsSummary(
                    label=d["label"], fold_iou=d["fold_iou"], fold_f1=d["fold_f1"]
                )

            if protocol == "zeroshot":
                summaries = {m: rebuild(d) for m, d in payload["summary"].items()}
            else:
                summaries = {payload["prompt_mode"]: rebuild(payload["summary"])}
            table = summary_table(
                f"{protocol} results ({self.cfg.dataset}, threshold "
                f"{payload['threshold']} from {payload['threshold_source']})",
                self.cfg.dataset,
                summaries,
                reference=reference,
            )
            outputs.extend(table.save(out_dir, f"summary_{protocol}"))

            if protocol == "cv" and payload["prompt_mode"] == "points":
                comp = unet_comparison_table(
                    {self.cfg.dataset: (summaries["points"].mean_f1, summaries["points"].std_f1)}
                )
                outputs.extend(comp.save(out_dir, "unet_comparison"))

            records = read_records(self.run_dir / "eval" / "records.csv")
            predictions = self.run_dir / "predictions"
            pred_dirs = [predictions] + sorted(predictions.glob("fold*"))
            by_id = samples_by_id(self._ensure_data())
            for pred_dir in pred_dirs:
                if pred_dir.is_dir() and any(pred_dir.glob("*.npz")):
                    outputs.extend(
                        report_best_worst(by_id, records, pred_dir, out_dir / "panels")
                    )
                    break
        return outputs

    # -- driver ------------------------------------------------------------------

    STAGE_FUNCS = {
        "prepare": stage_prepare,
        "prompts": stage_prompts,
        "finetune": stage_finetune,
        "sweep": stage_sweep,
        "eval": stage_eval,
        "report": stage_report,
    }

    def run(self, upto: str = None, force_stages=None):
        """Run the configured stages in order.

        ``upto`` truncates the plan after that stage (prerequisites still
        run if missing); ``force_stages`` re-runs those stages even when
        the manifest marks them complete, as does the instance-wide
        ``force`` flag.
        """
        stages = list(self.cfg.stages)
        if upto is not None:
            if upto not in stages:
                stages = stages + [upto]
            stages = stages[: stages.index(upto) + 1]
        force_stages = set(force_stages or ())

        self.run_dir.mkdir(parents=True, exist_ok=True)
        write_snapshot(self.cfg, self.run_dir)
        log_handler = logging.FileHandler(self.run_dir / "run.log")
        log_handler.setFormatter(
            logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
        )
        pkg_logger = logging.getLogger("lungsam")
        old_level = pkg_logger.level
        if pkg_logger.getEffectiveLevel() > logging.INFO:
            pkg_logger.setLevel(logging.INFO)  # the run log always records INFO
        pkg_logger.addHandler(log_handler)
        failed_marker = self.run_dir / "FAILED"
        try:
            done = self._done()
            for stage in stages:
                if stage in done and not self.force and stage not in force_stages:
                    log.info("stage %s already complete; skipping (use --force to redo)",
                             stage)
                    continue
                log.info("running stage: %s", stage)
                try:
                    outputs = self.STAGE_FUNCS[stage](self)
                except Exception:
                    failed_marker.write_text(stage + "\n")
                    raise
                self._mark(stage, outputs)
            if failed_marker.is_file():
                failed_marker.unlink()
        finally:
            pkg_logger.removeHandler(log_handler)
            pkg_logger.setLevel(old_level)
            log_handler.close()
        return self.run_dir


def run_config(cfg: ExperimentConfig, force: bool = False) -> Path:
    return Pipeline(cfg, force=force).run()


def _load_within_reference(reference_run):
    """Pull the points summary out of a finished run for the comparison row."""
    from .metrics import MetricsSummary

    path = Path(reference_run) / "eval" / "summary.json"
    if not path.is_file():
        raise LungSamError(f"reference run has no eval summary at {path}")
    payload = json.loads(path.read_text())
    body = payload["summary"]
    if payload.get("protocol") == "zeroshot":
        body = body.get("points") or next(iter(body.values()))
    return MetricsSummary(label=body["label"], fold_iou=body["fold_iou"],
                          fold_f1=body["fold_f1"])


def run_cross_eval(source_run_dir, target_cache, out_dir, seed: int = 42,
                   threshold: float = 0.5, device: str = "cpu", reference_run=None):
    """Evaluate a fine-tuned decoder from one dataset's run on another dataset.

    Points prompts only; the target's own training-role mean image is
    used. ``reference_run`` (a finished run on the target dataset) fills
    the within-dataset comparison row. Returns (summary, records).
    """
    source_run = Path(source_run_dir)
    resolved = json.loads((source_run / "config_resolved.json").read_text())
    ckpt = source_run / "train" / "best_decoder.npz"
    if not ckpt.is_file():
        raise LungSamError(f"no fine-tuned decoder at {ckpt}; run finetune first")

    samples = load_cache(target_cache)
    plans = ensure_plans(samples, target_cache, seed)
    plan = plans["holdout_60_20_20"]

    model = load_model(
        resolved["model_backend"], device=device,
        checkpoint_path=resolved.get("checkpoint") or None,
    )
    model.load_trainable(ckpt)
    model.sync_trainable()

    opts = PromptOptions(mode="points", **{
        k: v for k, v in resolved.get("prompts", {}).items()
        if k in ("level", "k_per_component", "seed")
    })
    out_dir = Path(out_dir)
    summary, records = cross_dataset_eval(
        model, samples, plan, opts, threshold=threshold, save_dir=out_dir / "predictions"
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    source_ds = resolved["dataset"]
    target_ds = plan.dataset
    (out_dir / "summary.json").write_text(
        json.dumps(_summary_payload(summary, {
            "source_dataset": source_ds,
            "target_dataset": target_ds,
            "threshold": threshold,
        }), indent=1)
    )
    write_records(out_dir / "records.csv", records)
    within = _load_within_reference(reference_run) if reference_run else None
    table = transfer_table(source_ds, target_ds, summary, within_summary=within)
    table.save(out_dir, "transfer_table")
    return summary, records
