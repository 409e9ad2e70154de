"""Reduced-scale sine experiments behind the curve-level acceptance criteria.

Each curve experiment is 5 runs over 20,000 meta-training tasks with the
default validation/test streams; ``protocol-smoke`` is one run of the
untouched default configuration.  Results are cached under ``acceptance/results``,
keyed by config hash, so the test-suite reuses them.  Precompute with::

    python3 tests/acceptance_experiments.py [name ...]
"""
from __future__ import annotations

import json
import sys
import time
from pathlib import Path

from metaturtle.harness import ExperimentConfig, default_learner_config, run_experiment
from metaturtle.learners import TurtleConfig

CACHE = Path(__file__).resolve().parents[1] / "acceptance" / "results"

_COMMON = dict(k=5, train_tasks=20_000, val_tasks=1_000, test_tasks=2_000, val_every=2_500, runs=5, seed=0)

EXPERIMENTS = {
    # gradient-only meta-network, fixed unit step sizes, J=1
    "turtle": ExperimentConfig("turtle", TurtleConfig(T=5), meta_batch=1, **_COMMON),
    "fo-turtle": ExperimentConfig("fo-turtle", TurtleConfig(T=5, second_order=False), meta_batch=1, **_COMMON),
    "maml": ExperimentConfig("maml", default_learner_config("maml", 5), meta_batch=1, **_COMMON),
    "fomaml": ExperimentConfig("fomaml", default_learner_config("fomaml", 5), meta_batch=1, **_COMMON),
    "lstm": ExperimentConfig("lstm", default_learner_config("lstm", 5), meta_batch=1, **_COMMON),
    "tuned-turtle": ExperimentConfig("turtle", default_learner_config("turtle", 5), meta_batch=2, **_COMMON),
    "lstm-enhanced": ExperimentConfig("lstm-enhanced", default_learner_config("lstm-enhanced"), meta_batch=1,
                                      **_COMMON),
    # untouched defaults (what ``metaturtle train --runs 1`` builds)
    "protocol-smoke": ExperimentConfig(runs=1),
}


def cache_dir(name: str) -> Path:
    return CACHE / f"{name}-{EXPERIMENTS[name].hash()}"


def results(name: str, compute: bool = True) -> dict | None:
    path = cache_dir(name) / "results.json"
    if path.exists():
        return json.loads(path.read_text())
    if not compute:
        return None
    return run_experiment(EXPERIMENTS[name], cache_dir(name))


if __name__ == "__main__":
    for name in sys.argv[1:] or list(EXPERIMENTS):
        started = time.perf_counter()
        res = results(name)
        agg = res["aggregate"]
        summary = "all runs failed" if agg is None else (
            f"best_val {agg['best_val']['mean']:.4f}±{agg['best_val']['ci95']:.4f}  "
            f"test {agg['test']['mean']:.4f}±{agg['test']['ci95']:.4f}")
        print(f"{name:14s} {summary}  failed={len(res['failed_runs'])}  {time.perf_counter() - started:.0f}s",
              flush=True)
