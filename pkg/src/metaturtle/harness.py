"""Outer training loop, evaluation protocol, aggregation and grid search.

A run validates at ``tasks_seen = 0`` and after every ``val_every`` training
tasks, keeps the best checkpoint by validation MSE, and evaluates only that
checkpoint on the test stream.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Value
from .errors import ConfigError, DivergenceError, MetaTurtleError
from .learners import (AdamState, LstmMetaConfig, MamlConfig, TurtleConfig, config_to_json, make_learner,
                       outer_step)
from .network import MlpSpec, ParamSet
from .tasks import DEFAULT_COUNTS, X_RANGE, make_streams

log = logging.getLogger(__name__)

ALGOS = ("maml", "fomaml", "lstm", "lstm-enhanced", "turtle", "fo-turtle")

# Best TURTLE settings per inner-step count: (time input, history, beta, meta-batch).
TUNED_TURTLE = {
    1: (False, "gradients", 0.0, 1),
    5: (True, "gradients", 0.9, 2),
    10: (True, "gradients", 0.3, 4),
}

TUNING_GRID = {
    "time": [True, False],
    "history": ["gradients", "updates"],
    "beta": [0.0, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8, 0.9, 0.95],
    "meta_batch": [1, 2, 4, 8, 16, 32, 64],
}

_CONFIG_TYPES = {"maml": MamlConfig, "fomaml": MamlConfig, "lstm": LstmMetaConfig,
                 "lstm-enhanced": LstmMetaConfig, "turtle": TurtleConfig, "fo-turtle": TurtleConfig}


def default_learner_config(algo: str, inner_steps: int | None = None):
    """Algorithm defaults, including the tuned TURTLE settings for T in {1, 5, 10}."""
    if algo in ("maml", "fomaml"):
        return MamlConfig(T=inner_steps or 5, alpha=0.01, second_order=algo == "maml")
    if algo == "lstm":
        return LstmMetaConfig(T=inner_steps or 5, second_order=False, input_mode="log-preprocessed")
    if algo == "lstm-enhanced":
        return LstmMetaConfig(T=inner_steps or 8, second_order=True, input_mode="raw")
    if algo in ("turtle", "fo-turtle"):
        T = inner_steps or 5
        time_in, history, beta, _ = TUNED_TURTLE.get(T, (False, "none", 0.0, 1))
        return TurtleConfig(T=T, use_time_input=time_in, history=history, beta=beta,
                            second_order=algo == "turtle")
    raise ConfigError(f"unknown algo {algo!r}")


def default_meta_batch(algo: str, inner_steps: int | None = None) -> int:
    if algo in ("turtle", "fo-turtle"):
        return TUNED_TURTLE.get(inner_steps or 5, (None, None, None, 1))[3]
    return 1


@dataclass
class ExperimentConfig:
    algo: str = "maml"
    learner: object = None
    k: int = 5
    meta_batch: int = 1
    train_tasks: int = DEFAULT_COUNTS["train"]
    val_tasks: int = DEFAULT_COUNTS["val"]
    test_tasks: int = DEFAULT_COUNTS["test"]
    val_every: int = 2500
    runs: int = 30
    seed: int = 0
    outer_lr: float = 1e-3
    x_range: tuple[float, float] = X_RANGE

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algo {self.algo!r}")
        if self.learner is None:
            self.learner = default_learner_config(self.algo)
        if not isinstance(self.learner, _CONFIG_TYPES[self.algo]):
            raise ConfigError(f"learner config does not match algo {self.algo!r}")
        for name in ("k", "meta_batch", "train_tasks", "val_tasks", "test_tasks", "val_every", "runs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.val_every > self.train_tasks:
            raise ConfigError("val_every must not exceed train_tasks")
        if self.meta_batch > self.val_every:
            raise ConfigError("meta_batch must not exceed val_every")
        if not self.outer_lr > 0:
            raise ConfigError("outer_lr must be positive")

    def to_json(self) -> dict:
        return {
            "algo": self.algo,
            "learner": config_to_json(self.learner),
            "k": self.k,
            "meta_batch": self.meta_batch,
            "train_tasks": self.train_tasks,
            "val_tasks": self.val_tasks,
            "test_tasks": self.test_tasks,
            "val_every": self.val_every,
            "runs": self.runs,
            "seed": self.seed,
            "outer_lr": self.outer_lr,
            "x_range": list(self.x_range),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        algo = obj.get("algo", "maml")
        learner = obj.pop("learner", None)
        if isinstance(learner, dict):
            learner = learner_config_from_json(algo, learner)
        if "x_range" in obj:
            obj["x_range"] = tuple(obj["x_range"])
        unknown = set(obj) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(learner=learner, **obj)

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def learner_config_from_json(algo: str, obj: dict):
    obj = dict(obj)
    base = obj.pop("base", None)
    if base is not None:
        obj["base"] = MlpSpec(tuple(base["widths"]), base.get("hidden", "relu"), base.get("output", "identity"))
    if "gate_history_init" in obj:
        obj["gate_history_init"] = tuple(obj["gate_history_init"])
    cls = _CONFIG_TYPES[algo]
    unknown = set(obj) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**obj)


@dataclass
class RunRecord:
    run_id: int
    seed: int
    config_hash: str
    curve: list = field(default_factory=list)
    best_tasks_seen: int | None = None
    best_val_mse: float | None = None
    test_mse: float | None = None
    wall_time: float = 0.0
    failed: bool = False
    failure: dict | None = None

    def to_json(self) -> dict:
        # wall_time is deliberately excluded: results.json must be reproducible.
        return {
            "run_id": self.run_id,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "validation_curve": [[int(t), float(m)] for t, m in self.curve],
            "best": None if self.best_tasks_seen is None else
            {"tasks_seen": self.best_tasks_seen, "val_mse": self.best_val_mse},
            "test_mse": self.test_mse,
            "failed": self.failed,
            "failure": self.failure,
        }


def run_seed(master_seed: int, run_id: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), 0x52554E, int(run_id)]).generate_state(1)[0])


def meta_hash(meta: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in meta:
        h.update(name.encode())
        h.update(np.ascontiguousarray(meta[name]).tobytes())
    return h.hexdigest()


def evaluate(learner, meta: dict[str, np.ndarray], tasks) -> float:
    """Mean query MSE after inner adaptation; never modifies ``meta``."""
    consts = {name: Value(a) for name, a in meta.items()}
    total = 0.0
    with np.errstate(all="ignore"):
        for i, task in enumerate(tasks):
            try:
                _, loss = learner.adapt(consts, task, track_meta=False)
            except DivergenceError as exc:
                exc.task_index = i
                raise
            total += loss.item()
    return total / len(tasks)


def meta_to_json(meta: dict[str, np.ndarray]) -> dict:
    """Group flat ``component/name`` arrays into per-component ParamSet JSON."""
    out: dict[str, dict] = {}
    for name, arr in meta.items():
        comp, _, rest = name.partition("/")
        out.setdefault(comp, {})[rest or comp] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
    return out


def meta_from_json(obj: dict) -> dict[str, np.ndarray]:
    meta = {}
    for comp, entries in obj.items():
        for name, v in ParamSet.from_json(entries):
            key = comp if name == comp else f"{comp}/{name}"
            meta[key] = v.data
    return meta


def write_checkpoint(path: Path, cfg: ExperimentConfig, meta, adam: AdamState, tasks_seen: int) -> None:
    obj = {"algo": cfg.algo, "config": cfg.to_json(), "meta_params": meta_to_json(meta),
           "adam_state": adam.to_json(), "tasks_seen": tasks_seen}
    path.write_text(json.dumps(obj))


def load_checkpoint(path) -> tuple[ExperimentConfig, dict, AdamState, int]:
    obj = json.loads(Path(path).read_text())
    meta = meta_from_json(obj["meta_params"])
    adam = AdamState.from_json(obj["adam_state"], {k: a.shape for k, a in meta.items()})
    return ExperimentConfig.from_json(obj["config"]), meta, adam, obj["tasks_seen"]


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_metrics(path: Path, rec: RunRecord) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tasks_seen", "split", "mse"])
        for t, m in rec.curve:
            w.writerow([t, "val", _fmt(m)])
        if rec.test_mse is not None:
            w.writerow([rec.best_tasks_seen, "test", _fmt(rec.test_mse)])


def train_run(cfg: ExperimentConfig, run_id: int = 0, run_dir: Path | None = None) -> RunRecord:
    """One meta-training run over a fixed task budget."""
    seed = run_seed(cfg.seed, run_id)
    rec = RunRecord(run_id=run_id, seed=seed, config_hash=cfg.hash())
    started = time.perf_counter()
    learner = make_learner(cfg.learner)
    train, val, test = make_streams(cfg.k, cfg.train_tasks, cfg.val_tasks, cfg.test_tasks, cfg.seed, cfg.x_range)
    val_tasks = list(val)
    meta = learner.init_meta(seed)
    adam = AdamState(lr=cfg.outer_lr)
    best_meta = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    def validate(seen: int) -> None:
        nonlocal best_meta
        mse = evaluate(learner, meta, val_tasks)
        rec.curve.append((seen, mse))
        log.info("run %d  tasks_seen=%d  val_mse=%.6f", run_id, seen, mse)
        if rec.best_val_mse is None or mse < rec.best_val_mse:
            rec.best_tasks_seen, rec.best_val_mse = seen, mse
            best_meta = {k: a.copy() for k, a in meta.items()}
            if run_dir is not None:
                write_checkpoint(run_dir / "best.json", cfg, best_meta, adam, seen)

    seen = 0
    phase = "val"
    try:
        validate(0)
        next_val = cfg.val_every
        while seen < cfg.train_tasks:
            phase = "train"
            idx = range(seen, min(seen + cfg.meta_batch, cfg.train_tasks))
            adam, meta, _ = outer_step(adam, meta, [train[i] for i in idx], learner, first_index=seen)
            seen += len(idx)
            if seen >= next_val:
                phase = "val"
                validate(seen)
                next_val += cfg.val_every
        phase = "test"
        rec.test_mse = evaluate(learner, best_meta, list(test))
    except DivergenceError as exc:
        rec.failed = True
        rec.failure = {"phase": phase, "tasks_seen": seen, "task_index": exc.task_index,
                       "inner_step": exc.step, "message": str(exc)}
        log.warning("run %d failed: %s", run_id, rec.failure)
    rec.wall_time = time.perf_counter() - started
    if run_dir is not None:
        write_metrics(run_dir / "metrics.csv", rec)
    return rec


def _ci95(values: list[float]) -> float:
    if len(values) < 2:
        return 0.0
    sd = float(np.std(values, ddof=1))
    return 1.96 * sd / math.sqrt(len(values))


def summarize(values: list[float]) -> dict:
    return {"mean": float(np.mean(values)), "ci95": _ci95(values), "median": float(np.median(values)),
            "n": len(values), "values": [float(v) for v in values]}


def aggregate(records: list[RunRecord]) -> dict:
    """Mean and 1.96·sd/√R half-width over successful runs."""
    ok = [r for r in records if not r.failed]
    if not ok:
        raise MetaTurtleError("all runs failed")
    return {
        "best_val": summarize([r.best_val_mse for r in ok]),
        "test": summarize([r.test_mse for r in ok]),
        "failed": len(records) - len(ok),
    }


def _run_one(args):
    cfg, run_id, run_dir = args
    return train_run(cfg, run_id, run_dir)


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int = 1) -> dict:
    """All runs of one configuration; writes results.json when ``out_dir`` is set."""
    out = Path(out_dir) if out_dir is not None else None
    jobs_args = [(cfg, r, None if out is None else out / f"run_{r:03d}") for r in range(cfg.runs)]
    if jobs > 1 and cfg.runs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_one, jobs_args))
    else:
        records = [_run_one(a) for a in jobs_args]
    records.sort(key=lambda r: r.run_id)
    failed = [{"run_id": r.run_id, **(r.failure or {})} for r in records if r.failed]
    try:
        agg = aggregate(records)
    except MetaTurtleError:
        agg = None
    results = {
        "config": cfg.to_json(),
        "config_hash": cfg.hash(),
        "streams": {"train": cfg.train_tasks, "val": cfg.val_tasks, "test": cfg.test_tasks},
        "val_every": cfg.val_every,
        "per_run": [r.to_json() for r in records],
        "aggregate": None if agg is None else {"best_val": agg["best_val"], "test": agg["test"]},
        "failed_runs": failed,
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.json").write_text(json.dumps(results, indent=1))
        (out / "timings.json").write_text(json.dumps({f"run_{r.run_id:03d}": r.wall_time for r in records}))
    return results


# ---------------------------------------------------------------------------
# grid search


def check_grid_keys(cfg: ExperimentConfig, grid: dict) -> None:
    """Reject key names no setting could apply, before any run is spent on them."""
    known = {"time", "meta_batch", *cfg.learner.__dataclass_fields__, *ExperimentConfig.__dataclass_fields__}
    bad = sorted(set(grid) - known)
    if bad:
        raise ConfigError(f"unknown grid key {bad[0]!r}")


def apply_setting(cfg: ExperimentConfig, setting: dict) -> ExperimentConfig:
    """Return a copy of ``cfg`` with grid keys applied (time/history/beta/meta_batch or raw fields)."""
    learner_changes, exp_changes = {}, {}
    for key, value in setting.items():
        if key == "time":
            learner_changes["use_time_input"] = bool(value)
        elif key == "meta_batch":
            exp_changes["meta_batch"] = int(value)
        elif key in cfg.learner.__dataclass_fields__:
            learner_changes[key] = value
        elif key in ExperimentConfig.__dataclass_fields__:
            exp_changes[key] = value
        else:
            raise ConfigError(f"unknown grid key {key!r}")
    new = copy.copy(cfg)
    new = replace(new, learner=replace(cfg.learner, **learner_changes), **exp_changes)
    return new


def grid_settings(grid: dict) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("grid must be non-empty")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def rank_rows(rows: list[dict], default_meta_batch: int) -> list[dict]:
    """Ascending mean; ties go to the smaller meta-batch, then the setting's canonical JSON."""
    return sorted(rows, key=lambda r: (r["mean_best_val_mse"], r["setting"].get("meta_batch", default_meta_batch),
                                       json.dumps(r["setting"], sort_keys=True)))


def grid_search(base: ExperimentConfig, grid: dict, out_dir=None, jobs: int = 1) -> list[dict]:
    """Evaluate every setting; rank by mean best-validation MSE.

    Ties are broken by smaller meta-batch, then by the setting's canonical
    JSON text.  Settings whose runs all fail rank last with ``mean = inf``.
    """
    rows = []
    for i, setting in enumerate(grid_settings(grid)):
        try:
            cfg = apply_setting(base, setting)
        except ConfigError as exc:
            rows.append({"setting": setting, "mean_best_val_mse": math.inf, "ci95": None,
                         "runs": 0, "failed_runs": base.runs, "error": str(exc)})
            continue
        sub = None if out_dir is None else Path(out_dir) / f"setting_{i:03d}"
        res = run_experiment(cfg, sub, jobs)
        agg = res["aggregate"]
        rows.append({
            "setting": setting,
            "mean_best_val_mse": math.inf if agg is None else agg["best_val"]["mean"],
            "ci95": None if agg is None else agg["best_val"]["ci95"],
            "runs": 0 if agg is None else agg["best_val"]["n"],
            "failed_runs": len(res["failed_runs"]),
        })
    rows = rank_rows(rows, base.meta_batch)
    for r in rows:
        if math.isinf(r["mean_best_val_mse"]):
            r["mean_best_val_mse"] = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "grid.json").write_text(json.dumps(rows, indent=1, default=_json_default))
    return rows


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(type(x))
