import math

import numpy as np
import pytest
from scipy.special import expit

from metaturtle import autodiff as ad
from metaturtle import learners as L
from metaturtle.checks import check_theorem1, check_turtle_passthrough
from metaturtle.errors import ConfigError, DivergenceError
from metaturtle.learners import (AdamState, LstmMetaConfig, LstmMetaParams, MamlConfig, TurtleConfig, TurtleParams,
                                 gradient_descent, history_update, init_turtle_params, lstm_adapt, maml_adapt,
                                 make_learner, meta_gradient, outer_step, theorem1_construct, turtle_adapt)
from metaturtle.network import SINE_SPEC, MlpSpec, init_params
from metaturtle.tasks import sample_task, task_rng

TINY = MlpSpec((1, 4, 1))


def _task(i=0, k=5, split="train", seed=0):
    return sample_task(task_rng(seed, split, i), k)


# ---------------------------------------------------------------------------
# MAML


def test_gradient_descent_on_quadratic():
    th = ad.leaf(1.0)
    (t1,) = gradient_descent([th], lambda p: ad.square(p[0]), 1, 0.1, False)
    (t2,) = gradient_descent([th], lambda p: ad.square(p[0]), 2, 0.1, False)
    assert t1.item() == pytest.approx(0.8, abs=1e-15)
    assert t2.item() == pytest.approx(0.64, abs=1e-15)


def test_maml_alpha_zero_is_identity():
    theta = init_params(SINE_SPEC, 0)
    task = _task()
    theta_T, q = maml_adapt(MamlConfig(T=3, alpha=0.0), theta, task)
    assert theta_T.allclose(theta)
    _, q0 = maml_adapt(MamlConfig(T=1, alpha=0.0), theta, task, track_meta=False)
    assert q.item() == q0.item()


def test_maml_reduces_support_loss():
    theta = init_params(SINE_SPEC, 1)
    task = _task(3)
    before = L._loss(SINE_SPEC, theta, task.support_x, task.support_y).item()
    theta_T, _ = maml_adapt(MamlConfig(T=5, alpha=0.01), theta, task, track_meta=False)
    assert L._loss(SINE_SPEC, theta_T, task.support_x, task.support_y).item() < before


def test_config_validation():
    with pytest.raises(ConfigError):
        MamlConfig(T=0)
    with pytest.raises(ConfigError):
        TurtleConfig(beta=1.5)
    with pytest.raises(ConfigError):
        TurtleConfig(meta_hidden_layers=0)
    with pytest.raises(ConfigError):
        TurtleConfig(history="momentum")
    with pytest.raises(ConfigError):
        LstmMetaConfig(input_mode="log-preprocessed", second_order=True)
    assert TurtleConfig(beta=1.0).beta == 1.0


def test_divergence_names_the_step():
    theta = init_params(TINY, 0)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as info:
        maml_adapt(MamlConfig(T=50, alpha=1e3, base=TINY), theta, _task(), track_meta=False)
    assert info.value.step is not None and 0 <= info.value.step < 50


# ---------------------------------------------------------------------------
# LSTM and the subsumption construction


@pytest.mark.parametrize("alpha,expected", [(0.01, -math.log(99.0)), (0.5, 0.0)])
def test_theorem1_input_bias(alpha, expected):
    p = theorem1_construct(alpha, init_params(TINY, 0))
    assert p.b_i.data[0] == pytest.approx(expected, abs=1e-15)
    assert p.b_f.data[0] == 20.0
    assert not p.W_f.data.any() and not p.W_i.data.any()


def test_theorem1_bias_value():
    assert theorem1_construct(0.01, init_params(TINY, 0)).b_i.data[0] == pytest.approx(-4.5951198501, abs=1e-10)


@pytest.mark.parametrize("alpha", [0.001, 0.01, 0.1, 0.5, 0.9])
def test_theorem1_gate_recovers_alpha(alpha):
    b = theorem1_construct(alpha, init_params(TINY, 0)).b_i.data[0]
    assert abs(expit(b) - alpha) <= 1e-12


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 2.0])
def test_theorem1_rejects_alpha_outside_unit_interval(alpha):
    with pytest.raises(ConfigError):
        theorem1_construct(alpha, init_params(TINY, 0))


def test_forget_gate_saturation_error():
    assert 1.0 - expit(20.0) <= 2.1e-9


def test_theorem1_subsumption():
    r = check_theorem1(alpha=0.01, n_tasks=20, T=10)
    assert r.passed, r.line()


def test_saturated_gates_freeze_the_cell():
    theta = init_params(TINY, 3)
    big = 800.0
    p = LstmMetaParams(theta, ad.leaf(np.zeros((1, 4))), ad.leaf(np.array([big])),
                       ad.leaf(np.zeros((1, 4))), ad.leaf(np.array([-big])))
    theta_T, _ = lstm_adapt(LstmMetaConfig(T=4, base=TINY), p, _task(), track_meta=False)
    assert theta_T.allclose(theta)


def test_lstm_gates_ignore_inputs_when_weights_are_zero():
    theta = init_params(TINY, 0)
    p = theorem1_construct(0.3, theta)
    g = L._gate(p.W_i, p.b_i, ad.constant(np.random.default_rng(0).normal(size=(7, 4))), 7)
    assert np.allclose(g.data, 0.3, rtol=0, atol=1e-15)


def test_log_preprocess():
    out = L.log_preprocess(np.array([1.0, -math.e ** 2, 0.0, 1e-6]))
    assert out.shape == (4, 2)
    assert out[0].tolist() == [0.0, 1.0]
    assert out[1, 0] == pytest.approx(0.2) and out[1, 1] == -1.0
    assert out[2].tolist() == [-1.0, 0.0]
    assert out[3, 0] == -1.0 and out[3, 1] == pytest.approx(math.exp(10) * 1e-6)


def test_log_preprocessed_lstm_runs():
    cfg = LstmMetaConfig(T=2, input_mode="log-preprocessed", base=TINY)
    lr = make_learner(cfg)
    meta = lr.init_meta(0)
    assert meta["lstm/W_f"].shape == (1, 6)
    grads, loss = meta_gradient(lr, meta, [_task()])
    assert np.isfinite(loss) and all(np.isfinite(g).all() for g in grads.values())


# ---------------------------------------------------------------------------
# TURTLE


def test_turtle_passthrough():
    r = check_turtle_passthrough(n_tasks=5, T=3)
    assert r.passed, r.line()


def test_turtle_passthrough_on_sine_network():
    r = check_turtle_passthrough(n_tasks=2, T=2, base=SINE_SPEC)
    assert r.passed, r.line()


def test_history_update():
    h = history_update(ad.constant(np.array([0.4])), ad.constant(np.array([2.5])), 0.0)
    assert h.data.tolist() == [2.5]
    h = history_update(ad.constant(np.array([0.0])), ad.constant(np.array([1.0])), 0.9)
    assert h.data[0] == pytest.approx(0.1, abs=1e-16)


def test_turtle_input_width():
    assert TurtleConfig().input_width == 1
    cfg = TurtleConfig(use_loss_input=True, use_time_input=True, history="updates")
    assert cfg.input_width == 4
    assert cfg.meta_spec.widths == (4, 20, 20, 20, 20, 20, 1)


def test_turtle_trainable_alpha():
    cfg = TurtleConfig(T=2, alpha_mode="trainable-vector", meta_hidden_layers=1, meta_hidden_width=3, base=TINY)
    lr = make_learner(cfg)
    meta = lr.init_meta(0)
    assert meta["alpha"].shape == (TINY.n_params,) and (meta["alpha"] == 1.0).all()
    grads, _ = meta_gradient(lr, meta, [_task()])
    assert grads["alpha"].any()


def test_turtle_time_feature_is_raw_step():
    seen = []
    orig = L.forward

    def spy(spec, params, x):
        if x.shape[1] == 2:
            seen.append(float(x.data[0, 1]))
        return orig(spec, params, x)

    cfg = TurtleConfig(T=3, use_time_input=True, meta_hidden_layers=1, meta_hidden_width=3, base=TINY)
    L.forward, saved = spy, L.forward
    try:
        turtle_adapt(cfg, init_turtle_params(cfg, 0), _task(), track_meta=False)
    finally:
        L.forward = saved
    assert seen == [0.0, 1.0, 2.0]


# ---------------------------------------------------------------------------
# meta-gradients


def _meta_fd(learner, meta, batch, eps=1e-6):
    out = {}
    for name, a in meta.items():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            vals = []
            for s in (1.0, -1.0):
                m = {k: v.copy() for k, v in meta.items()}
                m[name][idx] += s * eps
                vals.append(meta_gradient(learner, m, batch)[1])
            g[idx] = (vals[0] - vals[1]) / (2 * eps)
        out[name] = g
    return out


def _rel_err(a, n):
    return max(float(np.max(np.abs(a[k] - n[k]) / np.maximum(1.0, np.abs(n[k])))) for k in a)


SECOND_ORDER = [
    MamlConfig(T=3, alpha=0.05, second_order=True, base=TINY),
    LstmMetaConfig(T=3, second_order=True, base=TINY),
    TurtleConfig(T=3, meta_hidden_layers=1, meta_hidden_width=3, use_loss_input=True, use_time_input=True,
                 history="updates", beta=0.5, base=TINY),
]


@pytest.mark.parametrize("cfg", SECOND_ORDER, ids=["maml", "lstm", "turtle"])
def test_meta_gradient_finite_difference(cfg):
    lr = make_learner(cfg)
    meta = lr.init_meta(4)
    if "lstm/W_f" in meta:  # make the gates matter
        rng = np.random.default_rng(0)
        meta["lstm/W_f"] = rng.uniform(-0.3, 0.3, (1, 4))
        meta["lstm/W_i"] = rng.uniform(-0.3, 0.3, (1, 4))
        meta["lstm/b_i"] = np.array([-2.0])
        meta["lstm/b_f"] = np.array([2.0])
    if "phi/layer0.weight" in meta:  # keep the learned steps small
        meta["phi/layer1.weight"] = meta["phi/layer1.weight"] * 0.1
    batch = [_task(0), _task(1)]
    analytic, _ = meta_gradient(lr, meta, batch)
    assert _rel_err(analytic, _meta_fd(lr, meta, batch)) <= 1e-4


class _Frozen:
    """Record inner-loop gradients and losses, then replay them as constants."""

    def __init__(self):
        self.grads, self.losses, self.replay = [], [], False

    def __enter__(self):
        self._fg, self._ss = L._flat_grad, L._support_step

        def flat_grad(loss, pieces, create):
            if self.replay:
                return ad.constant(self.grads[self._gi()])
            g = self._fg(loss, pieces, create)
            self.grads.append(g.data.copy())
            return g

        def support_step(spec, params, task, t):
            loss = self._ss(spec, params, task, t)
            if self.replay:
                return ad.constant(self.losses[t])
            self.losses.append(loss.data.copy())
            return loss

        L._flat_grad, L._support_step = flat_grad, support_step
        return self

    def _gi(self):
        self._i = getattr(self, "_i", -1) + 1
        return self._i % len(self.grads)

    def __exit__(self, *exc):
        L._flat_grad, L._support_step = self._fg, self._ss


FIRST_ORDER = [
    LstmMetaConfig(T=3, second_order=False, base=TINY),
    TurtleConfig(T=3, meta_hidden_layers=1, meta_hidden_width=3, use_loss_input=True, history="gradients",
                 beta=0.5, second_order=False, base=TINY),
]


@pytest.mark.parametrize("cfg", FIRST_ORDER, ids=["lstm", "turtle"])
def test_detachment_contract(cfg):
    """First-order meta-gradient equals FD of the rollout with inner inputs frozen."""
    lr = make_learner(cfg)
    meta = lr.init_meta(2)
    if "phi/layer1.weight" in meta:
        meta["phi/layer1.weight"] = meta["phi/layer1.weight"] * 0.1
    task = _task(5)
    with _Frozen() as fr:
        engine, _ = meta_gradient(lr, meta, [task])
        fr.replay = True
        reference = _meta_fd(lr, meta, [task])
    assert _rel_err(engine, reference) <= 1e-6


def test_first_order_maml_is_query_gradient_at_adapted_weights():
    cfg = MamlConfig(T=3, alpha=0.05, second_order=False, base=TINY)
    lr = make_learner(cfg)
    meta = lr.init_meta(1)
    task = _task(2)
    engine, _ = meta_gradient(lr, meta, [task])
    theta_T, _ = maml_adapt(cfg, L._sub({k: ad.leaf(v) for k, v in meta.items()}, "theta"), task, False)
    fresh = theta_T.clone()
    ref = ad.grad(L._loss(TINY, fresh, task.query_x, task.query_y), fresh.values())
    for name, g in zip(fresh.names(), ref):
        assert np.allclose(engine["theta/" + name], g.data, rtol=0, atol=1e-14)


def test_batch_gradient_is_sum_of_task_gradients():
    lr = make_learner(MamlConfig(T=2, alpha=0.05, base=TINY))
    meta = lr.init_meta(0)
    batch = [_task(i) for i in range(3)]
    total, loss_sum = meta_gradient(lr, meta, batch)
    parts = [meta_gradient(lr, meta, [t]) for t in batch]
    for name in meta:
        expected = parts[0][0][name] + parts[1][0][name] + parts[2][0][name]
        assert np.array_equal(total[name], expected)
    assert loss_sum == pytest.approx(sum(p[1] for p in parts), rel=1e-15)


def test_single_task_batch_matches_single_update():
    lr = make_learner(MamlConfig(T=1, base=TINY))
    meta = lr.init_meta(0)
    _, m1, _ = outer_step(AdamState(), meta, [_task()], lr)
    grads, _ = meta_gradient(lr, meta, [_task()])
    m2 = AdamState().update(meta, grads)
    assert all(np.array_equal(m1[k], m2[k]) for k in meta)


def test_adam_zero_gradients():
    st = AdamState()
    params = {"w": np.array([1.0, -2.0])}
    out = st.update(params, {"w": np.zeros(2)})
    assert st.step == 1 and np.array_equal(out["w"], params["w"])


def test_adam_first_step_moves_by_lr():
    st = AdamState(lr=1e-3)
    out = st.update({"w": np.array([0.0, 0.0])}, {"w": np.array([3.0, -0.5])})
    assert np.allclose(out["w"], [-1e-3, 1e-3], rtol=0, atol=1e-10)  # epsilon shifts it by ~2e-11


def test_adam_json_roundtrip():
    st = AdamState()
    st.update({"w": np.ones((2, 2))}, {"w": np.arange(4.0).reshape(2, 2)})
    back = AdamState.from_json(st.to_json(), {"w": (2, 2)})
    assert back.step == 1 and np.array_equal(back.m["w"], st.m["w"]) and np.array_equal(back.v["w"], st.v["w"])


def test_divergence_carries_task_index():
    lr = make_learner(MamlConfig(T=40, alpha=1e3, base=TINY))
    meta = lr.init_meta(0)
    with pytest.raises(DivergenceError) as info:
        meta_gradient(lr, meta, [_task(0), _task(1)], first_index=100)
    assert info.value.task_index == 100


def test_outer_step_needs_tasks():
    lr = make_learner(MamlConfig(base=TINY))
    with pytest.raises(ConfigError):
        outer_step(AdamState(), lr.init_meta(0), [], lr)


def test_learner_names():
    assert make_learner(MamlConfig(second_order=False)).algo == "fomaml"
    assert make_learner(LstmMetaConfig(second_order=True)).algo == "lstm-enhanced"
    assert make_learner(TurtleConfig(second_order=False)).algo == "fo-turtle"


def test_adapt_does_not_touch_meta_arrays():
    cfg = TurtleConfig(T=2, meta_hidden_layers=1, meta_hidden_width=3, history="updates", base=TINY)
    lr = make_learner(cfg)
    meta = lr.init_meta(0)
    snapshot = {k: v.copy() for k, v in meta.items()}
    meta_gradient(lr, meta, [_task()])
    assert all(np.array_equal(meta[k], snapshot[k]) for k in meta)


def test_turtle_params_dataclass():
    cfg = TurtleConfig(base=TINY, meta_hidden_layers=2, meta_hidden_width=4)
    p = init_turtle_params(cfg, 0)
    assert isinstance(p, TurtleParams) and p.alpha is None
    assert p.phi.names()[0] == "layer0.weight" and p.phi["layer0.weight"].shape == (1, 4)
