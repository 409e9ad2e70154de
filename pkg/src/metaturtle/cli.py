"""``metaturtle`` command line: train, grid, verify, plot.

Exit codes: 0 success, 1 usage or configuration error, 2 a check or run failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

from . import autodiff as ad
from . import checks
from .errors import ConfigError
from .harness import (ALGOS, TUNING_GRID, ExperimentConfig, check_grid_keys, default_learner_config,
                      default_meta_batch, grid_search, learner_config_from_json, run_experiment)
from .learners import config_to_json
from .plot import PlotInputError, plot

EXIT_OK, EXIT_USAGE, EXIT_FAILED = 0, 1, 2

# config field -> flag, so validation messages name what the user typed
_FLAGS = {
    "k": "--shots", "T": "--inner-steps", "meta_batch": "--meta-batch", "train_tasks": "--train-tasks",
    "val_tasks": "--val-tasks", "test_tasks": "--test-tasks", "val_every": "--val-every", "runs": "--runs",
    "seed": "--seed", "outer_lr": "--outer-lr", "alpha": "--alpha", "beta": "--beta", "history": "--history",
    "meta_hidden_layers": "--meta-layers", "meta_hidden_width": "--meta-width", "alpha_mode": "--alpha-mode",
    "input_mode": "--input-mode",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _x_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    if not lo < hi:
        raise argparse.ArgumentTypeError("LO must be below HI")
    return lo, hi


def _add_experiment_flags(p: argparse.ArgumentParser, algo_default=None) -> None:
    p.add_argument("--config", type=Path, help="JSON file mirroring ExperimentConfig; flags override it")
    p.add_argument("--algo", choices=ALGOS, default=algo_default)
    p.add_argument("--shots", type=_positive_int)
    p.add_argument("--inner-steps", type=_positive_int)
    p.add_argument("--train-tasks", type=_positive_int)
    p.add_argument("--val-every", type=_positive_int)
    p.add_argument("--val-tasks", type=_positive_int)
    p.add_argument("--test-tasks", type=_positive_int)
    p.add_argument("--runs", type=_positive_int)
    p.add_argument("--seed", type=_nonneg_int, help="master seed (fallback: $METATURTLE_SEED, then 0)")
    p.add_argument("--outer-lr", type=float)
    p.add_argument("--x-range", type=_x_range, metavar="LO,HI")
    p.add_argument("--out", type=Path)
    p.add_argument("--jobs", type=_positive_int, default=1)
    g = p.add_argument_group("learner overrides")
    g.add_argument("--alpha", type=float, help="MAML inner learning rate")
    g.add_argument("--input-mode", choices=("raw", "log-preprocessed"), help="LSTM gradient/loss inputs")
    g.add_argument("--time", dest="use_time_input", action=argparse.BooleanOptionalAction, default=None,
                   help="TURTLE time-step input")
    g.add_argument("--loss-input", dest="use_loss_input", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--history", choices=("none", "gradients", "updates"))
    g.add_argument("--beta", type=float)
    g.add_argument("--meta-layers", dest="meta_hidden_layers", type=_positive_int)
    g.add_argument("--meta-width", dest="meta_hidden_width", type=_positive_int)
    g.add_argument("--alpha-mode", choices=("fixed-ones", "trainable-vector"))
    g.add_argument("--normalize-time", action=argparse.BooleanOptionalAction, default=None)


_LEARNER_FLAGS = ("alpha", "input_mode", "use_time_input", "use_loss_input", "history", "beta",
                  "meta_hidden_layers", "meta_hidden_width", "alpha_mode", "normalize_time")


def _friendly(message: str) -> str:
    return re.sub(r"(?<![-\w])(" + "|".join(map(re.escape, _FLAGS)) + r")(?![-\w])", lambda m: _FLAGS[m.group(1)], message)


def build_config(args, env=None) -> ExperimentConfig:
    """Defaults < config file < flags."""
    env = os.environ if env is None else env
    file_obj = {}
    if args.config is not None:
        try:
            file_obj = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"--config {args.config}: {exc}") from None
        if not isinstance(file_obj, dict):
            raise ConfigError(f"--config {args.config}: expected a JSON object")
    algo = args.algo or file_obj.get("algo") or "maml"
    if algo not in ALGOS:
        raise ConfigError(f"--algo: unknown algorithm {algo!r}")
    file_learner = dict(file_obj.get("learner") or {})
    T = args.inner_steps or file_learner.get("T")

    learner = config_to_json(default_learner_config(algo, T))
    learner.update(file_learner)
    if T is not None:
        learner["T"] = T
    for name in _LEARNER_FLAGS:
        value = getattr(args, name, None)
        if value is None:
            continue
        if name not in learner:
            raise ConfigError(f"{_FLAGS.get(name, '--' + name)} does not apply to --algo {algo}")
        learner[name] = value
    learner_cfg = learner_config_from_json(algo, learner)

    obj = {k: v for k, v in file_obj.items() if k not in ("algo", "learner")}
    obj["algo"] = algo
    obj.setdefault("meta_batch", default_meta_batch(algo, learner_cfg.T))
    flag_map = {"shots": "k", "meta_batch": "meta_batch", "train_tasks": "train_tasks",
                "val_every": "val_every", "val_tasks": "val_tasks", "test_tasks": "test_tasks",
                "runs": "runs", "seed": "seed", "outer_lr": "outer_lr", "x_range": "x_range"}
    for flag, field in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            obj[field] = value
    if "seed" not in obj:
        raw = env.get("METATURTLE_SEED")
        if raw not in (None, ""):
            try:
                obj["seed"] = int(raw)
            except ValueError:
                raise ConfigError(f"METATURTLE_SEED must be an integer, got {raw!r}") from None
    obj["learner"] = config_to_json(learner_cfg)
    return ExperimentConfig.from_json(obj)


def _default_out(cfg: ExperimentConfig, kind: str) -> Path:
    return Path("results") / f"{kind}-{cfg.algo}-{cfg.hash()}"


def cmd_train(args) -> int:
    cfg = build_config(args)
    out = args.out or _default_out(cfg, "train")
    res = run_experiment(cfg, out, jobs=args.jobs)
    agg = res["aggregate"]
    head = f"{cfg.algo} {cfg.k} {cfg.learner.T} {cfg.meta_batch}"
    if agg is None:
        print(f"{head} failed")
    else:
        print(f"{head} {agg['test']['mean']:.6f}±{agg['test']['ci95']:.6f}")
    for f in res["failed_runs"]:
        print(f"run {f['run_id']} failed: phase={f.get('phase')} tasks_seen={f.get('tasks_seen')} "
              f"task_index={f.get('task_index')} inner_step={f.get('inner_step')}", file=sys.stderr)
    print(f"results: {out / 'results.json'}", file=sys.stderr)
    return EXIT_FAILED if res["failed_runs"] else EXIT_OK


def _load_grid(text: str | None) -> dict:
    if text is None:
        return TUNING_GRID
    path = Path(text)
    try:
        raw = path.read_text() if path.exists() else text
        grid = json.loads(raw)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"--grid: {exc}") from None
    if not isinstance(grid, dict) or not all(isinstance(v, list) for v in grid.values()):
        raise ConfigError("--grid: expected a JSON object of lists")
    return grid


def cmd_grid(args) -> int:
    cfg = build_config(args)
    grid = _load_grid(args.grid)
    check_grid_keys(cfg, grid)
    out = args.out or _default_out(cfg, "grid")
    rows = grid_search(cfg, grid, out, jobs=args.jobs)
    for rank, r in enumerate(rows, 1):
        mean = "failed" if r["mean_best_val_mse"] is None else f"{r['mean_best_val_mse']:.6f}"
        print(f"{rank:3d}  {mean}  {json.dumps(r['setting'], sort_keys=True)}")
    print(f"grid: {out / 'grid.json'}", file=sys.stderr)
    return EXIT_FAILED if any(r["failed_runs"] for r in rows) else EXIT_OK


def cmd_verify(args) -> int:
    if not 0.0 < args.theorem_alpha < 1.0:
        raise ConfigError("--theorem-alpha must lie in (0, 1)")
    if args.break_detach:
        ad.set_fault("detach", True)
    try:
        results = checks.run_all(theorem_alpha=args.theorem_alpha, fd_seeds=range(args.fd_compositions))
    finally:
        ad.set_fault("detach", False)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print("failing checks: " + "; ".join(f"{r.name} (error {r.error:.3e})" for r in failed), file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_plot(args) -> int:
    n = plot(args.inputs, args.labels, args.out)
    print(f"wrote {args.out} ({n} curves)", file=sys.stderr)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metaturtle", description="Meta-learning sine regression experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="meta-train and evaluate one configuration")
    _add_experiment_flags(p)
    p.add_argument("--meta-batch", type=_positive_int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="grid search over TURTLE hyperparameters")
    _add_experiment_flags(p, algo_default="turtle")
    p.add_argument("--meta-batch", type=_positive_int, help="base meta-batch for settings that do not set it")
    p.add_argument("--grid", help="JSON object of lists (inline or a file); default is the full tuning grid")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("verify", help="run the executable correctness checks")
    p.add_argument("--theorem-alpha", type=float, default=0.01)
    p.add_argument("--fd-compositions", type=_positive_int, default=100)
    p.add_argument("--break-detach", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("plot", help="SVG learning curves from metrics.csv files")
    p.add_argument("--in", dest="inputs", required=True, help="comma-separated CSV files, run dirs or globs")
    p.add_argument("--labels")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"metaturtle {args.command}: {_friendly(str(exc))}", file=sys.stderr)
        return EXIT_USAGE
    except PlotInputError as exc:
        print(f"metaturtle plot: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
