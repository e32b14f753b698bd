import json

import numpy as np
import pytest

from lungsam.datasets import load_montgomery
from lungsam.synthetic import write_synthetic_tree


def write_config(path, **overrides):
    """Write a small stub-backend experiment config next to its workspace."""
    cfg = {
        "dataset": "montgomery",
        "data_root": str(path.parent / "raw"),
        "cache_dir": str(path.parent / "cache"),
        "run_dir": str(path.parent / "run"),
        "seed": 42,
        "model_backend": "stub-small",
        "prompts": {"mode": "points", "level": 0.5, "k_per_component": 3, "jitter": 20},
        "train": {"learning_rate": 0.05, "epochs": 3, "batch_size": 4},
        "eval": {"protocol": "holdout", "threshold": 0.5},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path.write_text(json.dumps(cfg))
    return path


def pytest_runtest_logreport(report):
    # One visible pass/fail line per acceptance criterion.
    if "test_acceptance" not in report.nodeid or report.when != "call":
        return
    status = "PASS" if report.passed else ("FAIL" if report.failed else "SKIP")
    name = report.nodeid.split("::")[-1]
    print(f"\n[acceptance] {name}: {status}")


@pytest.fixture(scope="session")
def synth_tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic_montgomery")
    write_synthetic_tree(root, n=16, seed=11, layout="montgomery")
    return root


@pytest.fixture(scope="session")
def synth_samples(synth_tree):
    return load_montgomery(synth_tree)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
