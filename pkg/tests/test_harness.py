import csv
import json
import math

import numpy as np
import pytest

from metaturtle.errors import ConfigError, MetaTurtleError
from metaturtle.harness import (TUNING_GRID, TUNED_TURTLE, ExperimentConfig, RunRecord, aggregate, apply_setting,
                                default_learner_config, evaluate, grid_search, grid_settings, load_checkpoint,
                                meta_from_json, meta_hash, meta_to_json, rank_rows, run_experiment, summarize, train_run)
from metaturtle.learners import LstmMetaConfig, MamlConfig, TurtleConfig, make_learner
from metaturtle.network import MlpSpec
from metaturtle.tasks import make_streams

TINY = MlpSpec((1, 4, 1))


def tiny_cfg(**kw):
    base = dict(algo="maml", learner=MamlConfig(T=1, alpha=0.01, base=TINY), train_tasks=20, val_every=10,
                val_tasks=4, test_tasks=4, runs=1, seed=3)
    base.update(kw)
    return ExperimentConfig(**base)


def test_curve_length_and_schedule():
    rec = train_run(tiny_cfg(train_tasks=50, val_every=25))
    assert [t for t, _ in rec.curve] == [0, 25, 50]
    rec = train_run(tiny_cfg(train_tasks=55, val_every=25))
    assert len(rec.curve) == math.floor(55 / 25) + 1


def test_meta_batch_crossing_validation_boundary():
    rec = train_run(tiny_cfg(train_tasks=21, val_every=7, meta_batch=3))
    assert [t for t, _ in rec.curve] == [0, 9, 15, 21]
    ts = [t for t, _ in rec.curve]
    assert all(a < b for a, b in zip(ts, ts[1:]))


def test_best_checkpoint_and_single_test(tmp_path):
    rec = train_run(tiny_cfg(train_tasks=40), run_dir=tmp_path)
    vals = [m for _, m in rec.curve]
    assert rec.best_val_mse == min(vals)
    assert rec.best_tasks_seen == rec.curve[int(np.argmin(vals))][0]
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert rows[0] == ["tasks_seen", "split", "mse"]
    tests = [r for r in rows[1:] if r[1] == "test"]
    assert len(tests) == 1 and int(tests[0][0]) == rec.best_tasks_seen
    assert float(tests[0][2]) == rec.test_mse
    # the checkpoint on disk reproduces the reported test number
    cfg, meta, adam, seen = load_checkpoint(tmp_path / "best.json")
    assert seen == rec.best_tasks_seen
    test = list(make_streams(cfg.k, cfg.train_tasks, cfg.val_tasks, cfg.test_tasks, cfg.seed)[2])
    assert evaluate(make_learner(cfg.learner), meta, test) == rec.test_mse


def test_metrics_use_17_significant_digits(tmp_path):
    rec = train_run(tiny_cfg(), run_dir=tmp_path)
    for row in list(csv.reader(open(tmp_path / "metrics.csv")))[1:]:
        assert float(row[2]) == float(f"{float(row[2]):.17g}")
    assert rec.curve[0][1] == float(list(csv.reader(open(tmp_path / "metrics.csv")))[1][2])


@pytest.mark.parametrize("learner", [
    MamlConfig(T=2, base=TINY),
    LstmMetaConfig(T=2, base=TINY),
    TurtleConfig(T=2, meta_hidden_layers=1, meta_hidden_width=3, history="updates", base=TINY),
])
def test_evaluation_is_read_only(learner):
    lr = make_learner(learner)
    meta = lr.init_meta(0)
    before = meta_hash(meta)
    evaluate(lr, meta, list(make_streams(5, 1, 5, 1, 0)[1]))
    assert meta_hash(meta) == before


def test_run_is_deterministic():
    a = train_run(tiny_cfg()).to_json()
    b = train_run(tiny_cfg()).to_json()
    assert a == b
    assert train_run(tiny_cfg(), run_id=1).to_json() != a


def test_runs_share_streams_but_not_init():
    a, b = train_run(tiny_cfg(), 0), train_run(tiny_cfg(), 1)
    assert a.seed != b.seed and a.curve[0][1] != b.curve[0][1]


def test_aggregate_examples():
    assert summarize([1.0, 1.0, 1.0])["ci95"] == 0.0
    s = summarize([1.0, 2.0, 3.0])
    assert s["mean"] == 2.0
    assert s["ci95"] == pytest.approx(1.96 / math.sqrt(3), abs=1e-12)
    assert s["ci95"] == pytest.approx(1.1316, abs=1e-4)
    assert summarize([4.2])["ci95"] == 0.0


def _rec(i, val, test, failed=False):
    return RunRecord(run_id=i, seed=i, config_hash="x", best_val_mse=val, test_mse=test, failed=failed)


def test_aggregate_excludes_failed_runs():
    agg = aggregate([_rec(0, 1.0, 2.0), _rec(1, None, None, failed=True), _rec(2, 3.0, 4.0)])
    assert agg["failed"] == 1 and agg["best_val"]["values"] == [1.0, 3.0] and agg["test"]["mean"] == 3.0
    with pytest.raises(MetaTurtleError):
        aggregate([_rec(0, None, None, failed=True)])


def test_divergent_run_is_marked_failed(tmp_path):
    cfg = tiny_cfg(learner=MamlConfig(T=30, alpha=50.0, base=TINY), runs=2)
    res = run_experiment(cfg, tmp_path)
    assert res["aggregate"] is None
    assert len(res["failed_runs"]) == 2
    f = res["failed_runs"][0]
    assert f["phase"] == "val" and f["tasks_seen"] == 0 and f["task_index"] is not None
    assert f["inner_step"] is not None


def test_results_json_structure(tmp_path):
    res = run_experiment(tiny_cfg(runs=2), tmp_path)
    on_disk = json.loads((tmp_path / "results.json").read_text())
    assert on_disk == json.loads(json.dumps(res))
    assert set(on_disk) >= {"config", "per_run", "aggregate", "failed_runs"}
    assert set(on_disk["aggregate"]) == {"best_val", "test"}
    assert {"mean", "ci95"} <= set(on_disk["aggregate"]["test"])
    assert len(on_disk["per_run"]) == 2
    assert (tmp_path / "run_000" / "metrics.csv").exists() and (tmp_path / "run_001" / "best.json").exists()
    assert "wall_time" not in json.dumps(on_disk)


def test_results_are_byte_identical(tmp_path):
    run_experiment(tiny_cfg(runs=2), tmp_path / "a")
    run_experiment(tiny_cfg(runs=2), tmp_path / "b")
    assert (tmp_path / "a" / "results.json").read_bytes() == (tmp_path / "b" / "results.json").read_bytes()


def test_parallel_runs_match_serial(tmp_path):
    run_experiment(tiny_cfg(runs=2), tmp_path / "serial", jobs=1)
    run_experiment(tiny_cfg(runs=2), tmp_path / "par", jobs=2)
    assert (tmp_path / "serial" / "results.json").read_bytes() == (tmp_path / "par" / "results.json").read_bytes()


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_cfg(val_every=30)
    with pytest.raises(ConfigError):
        tiny_cfg(runs=0)
    with pytest.raises(ConfigError):
        tiny_cfg(meta_batch=11)
    with pytest.raises(ConfigError):
        ExperimentConfig(algo="maml", learner=TurtleConfig())
    with pytest.raises(ConfigError):
        ExperimentConfig(algo="reptile")


def test_config_json_roundtrip():
    for algo in ("maml", "fomaml", "lstm", "lstm-enhanced", "turtle", "fo-turtle"):
        cfg = ExperimentConfig(algo=algo, runs=2)
        back = ExperimentConfig.from_json(json.loads(json.dumps(cfg.to_json())))
        assert back == cfg and back.hash() == cfg.hash()
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json({"algo": "maml", "bogus": 1})


def test_default_protocol():
    cfg = ExperimentConfig()
    assert (cfg.train_tasks, cfg.val_tasks, cfg.test_tasks, cfg.val_every, cfg.runs) == (70000, 1000, 2000, 2500, 30)


def test_defaults_for_algorithms():
    t5 = default_learner_config("turtle", 5)
    assert (t5.use_time_input, t5.history, t5.beta) == (True, "gradients", 0.9)
    assert TUNED_TURTLE[5] == (True, "gradients", 0.9, 2)
    assert TUNED_TURTLE[1] == (False, "gradients", 0.0, 1)
    assert default_learner_config("lstm-enhanced").T == 8
    enhanced = default_learner_config("lstm-enhanced")
    assert enhanced.second_order and enhanced.input_mode == "raw"
    assert default_learner_config("maml").alpha == 0.01
    assert not default_learner_config("fo-turtle").second_order


def test_meta_json_roundtrip():
    lr = make_learner(TurtleConfig(T=1, alpha_mode="trainable-vector", meta_hidden_layers=1, base=TINY))
    meta = lr.init_meta(0)
    back = meta_from_json(json.loads(json.dumps(meta_to_json(meta))))
    assert list(back) == list(meta)
    assert all(np.array_equal(back[k], meta[k]) for k in meta)


def test_table2_grid_values():
    assert TUNING_GRID["beta"] == [0.0, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8, 0.9, 0.95]
    assert TUNING_GRID["meta_batch"] == [1, 2, 4, 8, 16, 32, 64]
    assert len(grid_settings(TUNING_GRID)) == 2 * 2 * 9 * 7
    with pytest.raises(ConfigError):
        grid_settings({"beta": []})


def turtle_cfg(**kw):
    base = dict(algo="turtle", learner=TurtleConfig(T=1, meta_hidden_layers=1, meta_hidden_width=3, base=TINY),
                train_tasks=8, val_every=4, val_tasks=3, test_tasks=2, runs=1, seed=0)
    base.update(kw)
    return ExperimentConfig(**base)


def test_apply_setting():
    cfg = apply_setting(turtle_cfg(), {"time": True, "history": "gradients", "beta": 0.9, "meta_batch": 2})
    assert cfg.learner.use_time_input and cfg.learner.history == "gradients" and cfg.learner.beta == 0.9
    assert cfg.meta_batch == 2
    with pytest.raises(ConfigError):
        apply_setting(turtle_cfg(), {"colour": 1})


def test_grid_of_size_one(tmp_path):
    rows = grid_search(turtle_cfg(), {"beta": [0.3]}, tmp_path)
    assert len(rows) == 1 and rows[0]["setting"] == {"beta": 0.3}
    assert rows[0]["runs"] == 1 and rows[0]["mean_best_val_mse"] > 0
    on_disk = json.loads((tmp_path / "grid.json").read_text())
    assert on_disk[0]["setting"] == {"beta": 0.3}
    assert set(on_disk[0]) >= {"setting", "mean_best_val_mse", "ci95", "runs"}


def test_rank_rows_tie_breaks():
    rows = [{"setting": {"meta_batch": 4, "beta": 0.1}, "mean_best_val_mse": 1.0},
            {"setting": {"meta_batch": 2, "beta": 0.9}, "mean_best_val_mse": 1.0},
            {"setting": {"meta_batch": 2, "beta": 0.3}, "mean_best_val_mse": 1.0},
            {"setting": {"meta_batch": 8, "beta": 0.0}, "mean_best_val_mse": 0.5},
            {"setting": {"beta": 0.2}, "mean_best_val_mse": 1.0}]
    ranked = rank_rows(rows, default_meta_batch=1)
    assert [r["setting"] for r in ranked] == [
        {"meta_batch": 8, "beta": 0.0}, {"beta": 0.2}, {"meta_batch": 2, "beta": 0.3},
        {"meta_batch": 2, "beta": 0.9}, {"meta_batch": 4, "beta": 0.1}]


def test_grid_ranking_is_ascending():
    rows = grid_search(turtle_cfg(), {"history": ["updates", "gradients"], "time": [True, False]})
    means = [r["mean_best_val_mse"] for r in rows]
    assert len(rows) == 4 and means == sorted(means)


def test_grid_survives_failing_setting():
    base = tiny_cfg(learner=MamlConfig(T=30, alpha=0.01, base=TINY))
    rows = grid_search(base, {"alpha": [0.01, 50.0]})
    assert rows[0]["setting"] == {"alpha": 0.01} and rows[0]["mean_best_val_mse"] is not None
    assert rows[1]["mean_best_val_mse"] is None and rows[1]["failed_runs"] == 1
