#!/usr/bin/env python3
"""Benchmark the numba-jitted kernels against their pure-numpy twins.

Usage:
    python benchmarks/bench_kernels.py [--iterations N]

The jitted variants are warmed up first so compilation time is excluded.
Setting LUNGSAM_NUMBA=0 changes which family the package itself uses at
import time; this script always times both directly.
"""

import argparse
import time

import numpy as np

from lungsam import kernels


def bench(fn, args, iterations):
    times = []
    for _ in range(iterations):
        start = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--iterations", type=int, default=200)
    args = parser.parse_args()

    if not kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    mask_a = (rng.random((256, 256)) > 0.5).astype(np.uint8)
    mask_b = (rng.random((256, 256)) > 0.4).astype(np.uint8)
    probs = rng.uniform(0.0, 1.0, (256, 256))
    target = (rng.random((256, 256)) > 0.6).astype(np.float64)
    thresholds = np.array([0.50, 0.55, 0.60, 0.65, 0.70])

    cases = [
        ("overlap_counts", kernels.overlap_counts_numpy, kernels.overlap_counts_jit,
         (mask_a, mask_b)),
        ("dice_focal_value", kernels.dice_focal_value_numpy, kernels.dice_focal_value_jit,
         (probs, target, 1.0, 1.0, 2.0)),
        ("dice_focal_grad", kernels.dice_focal_grad_numpy, kernels.dice_focal_grad_jit,
         (probs, target, 1.0, 1.0, 2.0)),
        ("area_per_threshold", kernels.area_per_threshold_numpy,
         kernels.area_per_threshold_jit, (probs, thresholds)),
    ]

    print(f"iterations per case: {args.iterations} (median reported)")
    print(f"{'kernel':<22} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    print("-" * 58)
    for name, np_fn, jit_fn, case_args in cases:
        jit_fn(*case_args)  # warmup/compile
        t_np = bench(np_fn, case_args, args.iterations)
        t_jit = bench(jit_fn, case_args, args.iterations)
        print(
            f"{name:<22} {t_np * 1e6:>10.1f}us {t_jit * 1e6:>10.1f}us "
            f"{t_np / t_jit:>8.2f}x"
        )


if __name__ == "__main__":
    main()
