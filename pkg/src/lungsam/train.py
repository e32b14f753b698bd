"""Decoder-only fine-tuning: numpy Adam, training loop, grid search.

The loop is backend-agnostic: it reads live numpy parameter buffers from
the model, asks it for (loss, gradients) per batch, applies Adam in
numpy, and tells the model to sync. Per-epoch validation F1 (threshold
0.5) drives best-checkpoint selection; the post-hoc threshold sweep
happens in the evaluation layer.
"""

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datasets import FoldPlan, samples_by_id
from .errors import ConfigError, TrainingDiverged
from .metrics import binarize, f1
from .prompts import MODES

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

DEFAULT_GRID_LR = (1e-5, 1e-4, 1e-3)
DEFAULT_GRID_WD = (0.0, 1e-1, 1e-3)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 0.0
    epochs: int = 100
    batch_size: int = 4
    w_dice: float = 1.0
    w_focal: float = 1.0
    focal_gamma: float = 2.0
    prompt_mode: str = "points"
    seed: int = 42
    val_threshold: float = 0.5

    def problems(self) -> list:
        out = []
        if not self.learning_rate > 0:
            out.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            out.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            out.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.w_dice < 0 or self.w_focal < 0 or (self.w_dice == 0 and self.w_focal == 0):
            out.append("loss weights must be >= 0 and not both zero")
        if self.focal_gamma < 0:
            out.append(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.prompt_mode not in MODES:
            out.append(f"prompt_mode must be one of {MODES}, got '{self.prompt_mode}'")
        if not 0 < self.val_threshold < 1:
            out.append(f"val_threshold must lie in (0, 1), got {self.val_threshold}")
        return out

    def validate(self) -> "TrainConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self


@dataclass
class LearningCurve:
    train_loss: list = field(default_factory=list)
    val_f1: list = field(default_factory=list)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_f1"])
            for i, (loss, vf1) in enumerate(zip(self.train_loss, self.val_f1), start=1):
                writer.writerow([i, repr(loss), repr(vf1)])

    @classmethod
    def load(cls, path):
        curve = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                curve.train_loss.append(float(row["train_loss"]))
                curve.val_f1.append(float(row["val_f1"]))
        return curve


@dataclass
class RoleSplit:
    """Explicit train/val id lists; the holdout plan's roles, or a carved
    subset of the training folds during cross-validation."""

    train_ids: list
    val_ids: list


def split_from_plan(plan_or_split) -> RoleSplit:
    if isinstance(plan_or_split, RoleSplit):
        return plan_or_split
    if isinstance(plan_or_split, FoldPlan):
        return RoleSplit(
            train_ids=plan_or_split.role_ids("train"),
            val_ids=plan_or_split.role_ids("val"),
        )
    raise TypeError(f"expected FoldPlan or RoleSplit, got {type(plan_or_split)!r}")


def carve_validation(train_ids, fraction: float = 0.2, seed: int = 42) -> RoleSplit:
    """Deterministically hold out a validation slice from a training id set."""
    ids = sorted(train_ids)
    n_val = max(1, int(len(ids) * fraction))
    if n_val >= len(ids):
        raise ValueError(f"cannot carve {n_val} validation ids out of {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    val = sorted(ids[i] for i in order[:n_val])
    train = sorted(ids[i] for i in order[n_val:])
    return RoleSplit(train_ids=train, val_ids=val)


class Adam:
    """Adam over a dict of numpy parameter buffers, updated in place.

    weight_decay is the classic L2 coupling (added to the gradient).
    """

    def __init__(self, params: dict, lr: float, weight_decay: float = 0.0,
                 betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * p
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _validation_f1(model, samples_map, val_ids, prompts, threshold: float) -> float:
    scores = []
    for sid in val_ids:
        sample = samples_map[sid]
        soft = model.predict(sample, prompts[sid])
        scores.append(f1(sample.mask, binarize(soft.probs, threshold)))
    return float(np.mean(scores)) if scores else float("nan")


def train(model, samples, plan_or_split, prompts: dict, cfg: TrainConfig, run_dir=None):
    """Fine-tune the decoder; returns (model, LearningCurve).

    Fully reproducible given cfg.seed (batch order is the only sampled
    quantity). The best-validation-F1 decoder weights are restored into
    the returned model and checkpointed to ``run_dir`` when given.
    """
    if cfg.epochs < 1:
        raise ConfigError([f"epochs must be >= 1, got {cfg.epochs}"])
    split = split_from_plan(plan_or_split)
    by_id = samples_by_id(samples)
    missing = [i for i in split.train_ids if i not in prompts]
    if missing:
        raise ValueError(f"prompts missing for training sample(s): {missing[:5]}")

    train_ids = sorted(split.train_ids)
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(
        model.trainable_parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )

    curve = LearningCurve()
    best_f1 = -np.inf
    best_state = None
    best_epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_ids))
        epoch_loss = 0.0
        for start in range(0, len(train_ids), cfg.batch_size):
            batch_ids = [train_ids[i] for i in order[start : start + cfg.batch_size]]
            batch = [(by_id[sid], prompts[sid]) for sid in batch_ids]
            loss, grads = model.loss_and_grads(
                batch, w_dice=cfg.w_dice, w_focal=cfg.w_focal, gamma=cfg.focal_gamma
            )
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            optimizer.step(grads)
            model.sync_trainable()
            epoch_loss += loss * len(batch)
        curve.train_loss.append(epoch_loss / len(train_ids))

        val_f1 = _validation_f1(model, by_id, split.val_ids, prompts, cfg.val_threshold)
        curve.val_f1.append(val_f1)
        if np.isfinite(val_f1) and val_f1 > best_f1:
            best_f1 = val_f1
            best_state = model.get_trainable_state()
            best_epoch = epoch
        log.debug("epoch %d: loss %.5f val_f1 %.4f", epoch, curve.train_loss[-1], val_f1)

    if best_state is not None:
        model.set_trainable_state(best_state)
        model.sync_trainable()
        log.info("restored best checkpoint from epoch %d (val F1 %.4f)", best_epoch, best_f1)

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        curve.save(run_dir / "learning_curve.csv")
        model.save_trainable(run_dir / "best_decoder.npz")
    return model, curve


def grid_search(model_factory, samples, plan_or_split, prompts: dict, cfg: TrainConfig,
                grid_lr=DEFAULT_GRID_LR, grid_wd=DEFAULT_GRID_WD):
    """Train every (lr, wd) cell and select by validation F1.

    Ties break toward the smaller learning rate, then the smaller weight
    decay. Diverging cells score 0 and are flagged rather than fatal.
    Returns (best TrainConfig, table rows).
    """
    if not grid_lr or not grid_wd:
        raise ConfigError(["grid must be non-empty"])
    table = []
    best = None
    best_score = -np.inf
    for lr in sorted(grid_lr):
        for wd in sorted(grid_wd):
            cell_cfg = replace(cfg, learning_rate=lr, weight_decay=wd)
            model = model_factory()
            diverged = False
            try:
                _, curve = train(model, samples, plan_or_split, prompts, cell_cfg)
                score = float(np.nanmax(curve.val_f1))
            except TrainingDiverged as exc:
                log.warning("grid cell lr=%g wd=%g diverged at epoch %d", lr, wd, exc.epoch)
                diverged = True
                score = 0.0
            table.append(
                {"learning_rate": lr, "weight_decay": wd, "val_f1": score, "diverged": diverged}
            )
            if score > best_score:
                best_score = score
                best = cell_cfg
    return best, table


def save_grid_table(path, table):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["learning_rate", "weight_decay", "val_f1", "diverged"]
        )
        writer.writeheader()
        writer.writerows(table)
