"""``lungsam`` command-line entry point.

Subcommands mirror the pipeline stages (prepare, prompts, finetune,
sweep, eval, report, run) plus cross-eval and a synthetic-data helper.
Stage subcommands are config-driven and idempotent: completed stages are
detected from the run directory's manifest and skipped unless --force.
"""

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config
from .datasets import DATASET_URLS, FoldPlan, load_cache, load_dataset, save_cache
from .errors import ConfigError, LungSamError
from .pipeline import Pipeline, ensure_plans, run_cross_eval
from .prompts import build_prompts, compute_mean_image, write_prompt_manifest
from .synthetic import write_synthetic_tree

log = logging.getLogger("lungsam")


def _add_config_args(parser):
    parser.add_argument("--config", required=True, help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--device", choices=["cpu", "gpu"], default=None,
                        help="override the config device")
    parser.add_argument("--force", action="store_true",
                        help="re-run this stage even if already complete")


def _stage_command(args, stage: str):
    cfg = load_config(args.config, seed_override=args.seed, device_override=args.device)
    pipeline = Pipeline(cfg)
    pipeline.run(upto=stage, force_stages={stage} if args.force else set())
    print(f"{stage}: done (run directory: {cfg.run_dir})")
    return 0


def cmd_prepare(args):
    samples = load_dataset(args.dataset, args.root)
    save_cache(samples, args.out)
    ensure_plans(samples, args.out, args.seed)
    print(f"prepared {len(samples)} {args.dataset} samples -> {args.out}")
    return 0


def cmd_prompts(args):
    plan = FoldPlan.load(args.plan)
    cache_dir = args.cache or str(Path(args.plan).parent)
    samples = load_cache(cache_dir)
    mean = None
    if args.mode in ("points", "both"):
        mean = compute_mean_image(samples, plan)
    prompts = build_prompts(
        samples, mean, args.mode,
        k_per_component=args.k, level=args.level,
        jitter=args.jitter, seed=args.seed, single_box=args.single_box,
    )
    write_prompt_manifest(args.out, prompts)
    print(f"wrote prompts for {len(prompts)} samples -> {args.out}")
    return 0


def cmd_run(args):
    cfg = load_config(args.config, seed_override=args.seed, device_override=args.device)
    pipeline = Pipeline(cfg, force=args.force)
    run_dir = pipeline.run()
    print(f"pipeline complete: {run_dir}")
    return 0


def cmd_cross_eval(args):
    summary, records = run_cross_eval(
        args.source_run, args.target_cache, args.out,
        seed=args.seed, threshold=args.threshold, device=args.device,
        reference_run=args.reference_run,
    )
    print(
        f"transfer eval on {len(records)} samples: "
        f"F1 {summary.mean_f1:.4f}, IoU {summary.mean_iou:.4f} -> {args.out}"
    )
    return 0


def cmd_synth(args):
    ids = write_synthetic_tree(args.out, n=args.n, seed=args.seed, layout=args.layout)
    print(f"wrote {len(ids)} synthetic samples ({args.layout} layout) -> {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lungsam",
        description="Fine-tune and evaluate a promptable segmentation model "
        "for lung fields in chest X-rays.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="load a dataset tree, cache it, write split plans")
    p.add_argument("--dataset", required=True, choices=["montgomery", "shenzhen"])
    p.add_argument("--root", required=True, help="dataset root directory")
    p.add_argument("--out", required=True, help="cache output directory")
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("prompts", help="build a prompt manifest from a split plan")
    p.add_argument("--plan", required=True, help="plan JSON written by prepare")
    p.add_argument("--cache", default=None, help="cache dir (default: the plan's directory)")
    p.add_argument("--mode", required=True, choices=["box", "points", "both"])
    p.add_argument("--level", type=float, default=0.5, help="mean-image threshold")
    p.add_argument("--k", type=int, default=3, help="points per lung")
    p.add_argument("--jitter", type=int, default=20, help="box perturbation in px")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--single-box", action="store_true", help="one enclosing box per image")
    p.add_argument("--out", required=True, help="output manifest (JSONL)")
    p.set_defaults(func=cmd_prompts)

    for stage in ("finetune", "sweep", "eval", "report"):
        p = sub.add_parser(stage, help=f"run the {stage} stage (and any missing prerequisites)")
        _add_config_args(p)
        p.set_defaults(func=lambda args, stage=stage: _stage_command(args, stage))

    p = sub.add_parser("run", help="run every configured stage")
    _add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("cross-eval", help="evaluate a fine-tuned run on another dataset")
    p.add_argument("--source-run", required=True, help="run dir holding the trained decoder")
    p.add_argument("--target-cache", required=True, help="prepared cache of the target dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--reference-run", default=None,
                   help="finished run on the target dataset for the within-dataset row")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--device", choices=["cpu", "gpu"], default="cpu")
    p.set_defaults(func=cmd_cross_eval)

    p = sub.add_parser("synth", help="write a synthetic lung-like dataset tree")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layout", choices=["montgomery", "shenzhen"], default="montgomery")
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print("configuration problems:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return 2
    except LungSamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if "not found" in str(exc):
            for name, url in DATASET_URLS.items():
                print(f"  {name}: {url}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
