"""Declarative experiment configuration (JSON).

A config resolves every pipeline input up front; validation collects all
problems at once instead of failing on the first. The source file is
copied verbatim into the run directory, next to the resolved snapshot.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError
from .experiments import DEFAULT_THRESHOLDS, PromptOptions
from .prompts import MODES
from .train import TrainConfig

PROTOCOLS = ("holdout", "cv", "zeroshot")
STAGES = ("prepare", "prompts", "finetune", "sweep", "eval", "report")
DATASETS = ("montgomery", "shenzhen")


@dataclass
class EvalOptions:
    protocol: str = "holdout"
    threshold: float = 0.5
    thresholds: tuple = DEFAULT_THRESHOLDS
    use_sweep_threshold: bool = True  # prefer the sweep winner when available

    def problems(self):
        out = []
        if self.protocol not in PROTOCOLS:
            out.append(f"eval.protocol must be one of {PROTOCOLS}, got '{self.protocol}'")
        if not 0 < self.threshold < 1:
            out.append(f"eval.threshold must lie in (0, 1), got {self.threshold}")
        for t in self.thresholds:
            if not 0 < t < 1:
                out.append(f"eval.thresholds entry {t} outside (0, 1)")
        return out


def _prompt_problems(p: PromptOptions):
    out = []
    if p.mode not in MODES:
        out.append(f"prompts.mode must be one of {MODES}, got '{p.mode}'")
    if not 0 < p.level < 1:
        out.append(f"prompts.level must lie in (0, 1), got {p.level}")
    if p.k_per_component < 1:
        out.append(f"prompts.k_per_component must be >= 1, got {p.k_per_component}")
    if p.jitter < 0:
        out.append(f"prompts.jitter must be >= 0, got {p.jitter}")
    return out


@dataclass
class ExperimentConfig:
    dataset: str
    cache_dir: str
    run_dir: str
    data_root: str = ""
    seed: int = 42
    model_backend: str = "stub-small"
    checkpoint: str = ""
    device: str = "cpu"
    grid_search: bool = False  # sweep the lr/wd grid before the final fit
    prompts: PromptOptions = field(default_factory=PromptOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    stages: tuple = STAGES
    source_path: str = ""  # where the config was loaded from, for the snapshot

    def problems(self):
        out = []
        if self.dataset not in DATASETS:
            out.append(f"dataset must be one of {DATASETS}, got '{self.dataset}'")
        if not self.cache_dir:
            out.append("cache_dir is required")
        if not self.run_dir:
            out.append("run_dir is required")
        if self.device not in ("cpu", "gpu"):
            out.append(f"device must be cpu or gpu, got '{self.device}'")
        for stage in self.stages:
            if stage not in STAGES:
                out.append(f"unknown stage '{stage}' (expected subset of {STAGES})")
        if "prepare" in self.stages and not self.data_root:
            cache_manifest = Path(self.cache_dir) / "manifest.txt" if self.cache_dir else None
            if cache_manifest is None or not cache_manifest.is_file():
                out.append("data_root is required when the prepare stage has no cache to reuse")
        out.extend(_prompt_problems(self.prompts))
        out.extend(f"train.{p}" for p in self.train.problems())
        out.extend(self.eval.problems())
        return out

    def validate(self) -> "ExperimentConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def resolved_dict(self) -> dict:
        d = asdict(self)
        d.pop("source_path")
        d["prompts"] = asdict(self.prompts)
        d["train"] = asdict(self.train)
        d["eval"] = asdict(self.eval)
        d["eval"]["thresholds"] = list(self.eval.thresholds)
        d["stages"] = list(self.stages)
        return d


def _take(section: dict, cls, prefix: str, problems: list, **overrides):
    known = {f.name for f in cls.__dataclass_fields__.values()} if hasattr(cls, "__dataclass_fields__") else set()
    kwargs = {}
    for key, value in section.items():
        if key not in known:
            problems.append(f"unknown key '{prefix}.{key}'")
            continue
        kwargs[key] = value
    kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"bad section '{prefix}': {exc}")
        return cls()


def load_config(path, seed_override=None, device_override=None) -> ExperimentConfig:
    """Parse + validate a JSON experiment config, reporting all issues."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a JSON object"])

    problems = []
    top_known = {
        "dataset", "cache_dir", "run_dir", "data_root", "seed", "model_backend",
        "checkpoint", "device", "grid_search", "prompts", "train", "eval", "stages",
    }
    for key in raw:
        if key not in top_known:
            problems.append(f"unknown key '{key}'")

    prompts = _take(raw.get("prompts", {}), PromptOptions, "prompts", problems)
    train_section = dict(raw.get("train", {}))
    train_section.setdefault("seed", raw.get("seed", 42))
    train_section.setdefault("prompt_mode", prompts.mode)
    train = _take(train_section, TrainConfig, "train", problems)
    eval_section = dict(raw.get("eval", {}))
    if "thresholds" in eval_section:
        eval_section["thresholds"] = tuple(eval_section["thresholds"])
    eval_opts = _take(eval_section, EvalOptions, "eval", problems)

    cfg = ExperimentConfig(
        dataset=raw.get("dataset", ""),
        cache_dir=str(raw.get("cache_dir", "")),
        run_dir=str(raw.get("run_dir", "")),
        data_root=str(raw.get("data_root", "")),
        seed=int(seed_override if seed_override is not None else raw.get("seed", 42)),
        model_backend=str(raw.get("model_backend", "stub-small")),
        checkpoint=str(raw.get("checkpoint", "") or ""),
        device=str(device_override or raw.get("device", "cpu")),
        grid_search=bool(raw.get("grid_search", False)),
        prompts=prompts,
        train=train,
        eval=eval_opts,
        stages=tuple(raw.get("stages", STAGES)),
        source_path=str(path),
    )
    problems.extend(cfg.problems())
    if problems:
        raise ConfigError(sorted(set(problems)))
    return cfg


def write_snapshot(cfg: ExperimentConfig, run_dir):
    """Copy the source config verbatim and dump the resolved view."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if cfg.source_path and Path(cfg.source_path).is_file():
        (run_dir / "config.json").write_bytes(Path(cfg.source_path).read_bytes())
    (run_dir / "config_resolved.json").write_text(
        json.dumps(cfg.resolved_dict(), indent=1, sort_keys=True)
    )
