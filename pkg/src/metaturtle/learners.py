"""Inner-loop learners (MAML, meta-learner LSTM, TURTLE) and the outer update.

All three learners share one shape: take meta-parameters and a task, run
``T`` updates on the support set, and return the adapted weights together
with the query loss, differentiable with respect to the meta-parameters.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .errors import ConfigError, DivergenceError, NonFiniteError
from .network import SINE_SPEC, MlpSpec, ParamSet, flatten, forward, init_params, meta_net_spec, unflatten
from .tasks import SineTask

# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class MamlConfig:
    T: int = 5
    alpha: float = 0.01
    second_order: bool = True
    base: MlpSpec = SINE_SPEC

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if not self.alpha >= 0:
            raise ConfigError("alpha must be >= 0")


@dataclass(frozen=True)
class LstmMetaConfig:
    T: int = 5
    second_order: bool = False
    input_mode: str = "raw"
    gate_history_init: tuple[float, float] = (1.0, 0.01)
    base: MlpSpec = SINE_SPEC

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.input_mode not in ("raw", "log-preprocessed"):
            raise ConfigError(f"unknown input_mode {self.input_mode!r}")
        if self.input_mode == "log-preprocessed" and self.second_order:
            raise ConfigError("log-preprocessed inputs are only defined for the first-order LSTM")

    @property
    def gate_width(self) -> int:
        return 4 if self.input_mode == "raw" else 6


@dataclass(frozen=True)
class TurtleConfig:
    T: int = 5
    meta_hidden_layers: int = 5
    meta_hidden_width: int = 20
    use_loss_input: bool = False
    use_time_input: bool = False
    history: str = "none"
    beta: float = 0.0
    alpha_mode: str = "fixed-ones"
    second_order: bool = True
    normalize_time: bool = False
    base: MlpSpec = SINE_SPEC

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.meta_hidden_layers < 1:
            raise ConfigError("meta_hidden_layers must be >= 1")
        if self.history not in ("none", "gradients", "updates"):
            raise ConfigError(f"unknown history {self.history!r}")
        if self.alpha_mode not in ("fixed-ones", "trainable-vector"):
            raise ConfigError(f"unknown alpha_mode {self.alpha_mode!r}")

    @property
    def input_width(self) -> int:
        return 1 + self.use_loss_input + self.use_time_input + (self.history != "none")

    @property
    def meta_spec(self) -> MlpSpec:
        return meta_net_spec(self.input_width, self.meta_hidden_layers, self.meta_hidden_width)


def config_to_json(cfg) -> dict:
    d = asdict(cfg)
    d["base"] = {"widths": list(cfg.base.widths), "hidden": cfg.base.hidden, "output": cfg.base.output}
    if "gate_history_init" in d:
        d["gate_history_init"] = list(d["gate_history_init"])
    return d


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class LstmMetaParams:
    theta0: ParamSet
    W_f: Value
    b_f: Value
    W_i: Value
    b_i: Value


@dataclass
class TurtleParams:
    theta0: ParamSet
    phi: ParamSet
    alpha: Value | None = None


# ---------------------------------------------------------------------------
# helpers


def _loss(spec: MlpSpec, params: ParamSet, x: np.ndarray, y: np.ndarray) -> Value:
    return ad.mse_loss(forward(spec, params, x.reshape(-1, 1)), y)


def _trainable(params: ParamSet) -> ParamSet:
    """Fast weights must be differentiable even when the meta-params are constants."""
    if all(v.requires_grad for v in params.values()):
        return params
    return params.map(lambda _, v: v if v.requires_grad else Value(v.data, requires_grad=True))


def _support_step(spec, params, task, t):
    try:
        loss = _loss(spec, params, task.support_x, task.support_y)
    except NonFiniteError as exc:
        raise DivergenceError(t, detail=str(exc)) from None
    return loss


def _query(spec, params, task, T):
    try:
        return _loss(spec, params, task.query_x, task.query_y)
    except NonFiniteError as exc:
        raise DivergenceError(T, detail=str(exc)) from None


def _flat_grad(loss: Value, pieces: ParamSet, create_graph: bool) -> Value:
    gs = ad.grad(loss, pieces.values(), create_graph=create_graph)
    return ad.concat([ad.reshape(g, (g.data.size,)) for g in gs])


def _column(v: Value, n: int) -> Value:
    return ad.reshape(v, (n, 1))


# ---------------------------------------------------------------------------
# MAML


def gradient_descent(params: list[Value], loss_fn, T: int, alpha: float, create_graph: bool) -> list[Value]:
    """``T`` steps of ``p <- p - alpha * dL/dp`` on an arbitrary scalar loss."""
    for t in range(T):
        try:
            loss = loss_fn(params)
        except NonFiniteError as exc:
            raise DivergenceError(t, detail=str(exc)) from None
        gs = ad.grad(loss, params, create_graph=create_graph)
        try:
            params = [ad.sub(v, ad.scale(g, alpha)) for v, g in zip(params, gs)]
        except NonFiniteError as exc:
            raise DivergenceError(t, detail=str(exc)) from None
    return params


def maml_adapt(cfg: MamlConfig, theta: ParamSet, task: SineTask, track_meta: bool = True):
    """Gradient descent on the support set, then the query loss.

    Support gradients are graph nodes when ``cfg.second_order`` (and
    ``track_meta``) hold, constants otherwise.
    """
    params = _trainable(theta)
    names = params.names()

    def support(vals):
        return _loss(cfg.base, ParamSet(zip(names, vals)), task.support_x, task.support_y)

    final = gradient_descent(params.values(), support, cfg.T, cfg.alpha, cfg.second_order and track_meta)
    theta_T = ParamSet(zip(names, final))
    return theta_T, _query(cfg.base, theta_T, task, cfg.T)


# ---------------------------------------------------------------------------
# meta-learner LSTM

_LOG_P = 10.0


def log_preprocess(x: np.ndarray) -> np.ndarray:
    """Magnitude/sign preprocessing of the original meta-learner LSTM (p = 10)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    big = np.abs(x) >= math.exp(-_LOG_P)
    with np.errstate(divide="ignore"):
        first = np.where(big, np.log(np.abs(x)) / _LOG_P, -1.0)
    second = np.where(big, np.sign(x), math.exp(_LOG_P) * x)
    return np.column_stack([first, second])


def init_lstm_params(cfg: LstmMetaConfig, seed: int) -> LstmMetaParams:
    theta0 = init_params(cfg.base, seed)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x157, 1])))
    w = cfg.gate_width
    return LstmMetaParams(
        theta0=theta0,
        W_f=Value(rng.uniform(-0.01, 0.01, size=(1, w)), requires_grad=True),
        b_f=Value(np.array([5.0]), requires_grad=True),
        W_i=Value(rng.uniform(-0.01, 0.01, size=(1, w)), requires_grad=True),
        b_i=Value(np.array([-math.log(99.0)]), requires_grad=True),
    )


def _gate(W: Value, b: Value, feats: Value, n: int) -> Value:
    return ad.reshape(ad.sigmoid(ad.linear(feats, ad.transpose(W), b)), (n,))


def lstm_adapt(cfg: LstmMetaConfig, params: LstmMetaParams, task: SineTask, track_meta: bool = True):
    """Coordinate-wise LSTM cell update with the weights held in the cell state.

    Per coordinate the gate inputs are ``[grad, loss, cell, previous gate]``
    (gradient and loss log-preprocessed into two columns each in
    ``log-preprocessed`` mode).  Gate parameters are shared across
    coordinates.
    """
    spec = cfg.base
    n = spec.n_params
    create = cfg.second_order and track_meta
    c = flatten(_trainable(params.theta0))
    f_prev = ad.constant(np.full(n, float(cfg.gate_history_init[0])))
    i_prev = ad.constant(np.full(n, float(cfg.gate_history_init[1])))
    for t in range(cfg.T):
        pieces = unflatten(spec, c)
        loss = _support_step(spec, pieces, task, t)
        g = _flat_grad(loss, pieces, create)
        try:
            if create:
                g_in, loss_in = g, loss
            else:
                g_in, loss_in = ad.detach(g), ad.detach(loss)
            if cfg.input_mode == "raw":
                shared = [_column(g_in, n), ad.broadcast(loss_in, (n, 1))]
            else:
                lp = log_preprocess(loss_in.data)
                shared = [ad.constant(log_preprocess(g_in.data)),
                          ad.constant(np.repeat(lp, n, axis=0))]
            f = _gate(params.W_f, params.b_f, ad.concat(shared + [_column(c, n), _column(f_prev, n)]), n)
            i = _gate(params.W_i, params.b_i, ad.concat(shared + [_column(c, n), _column(i_prev, n)]), n)
            c = ad.add(ad.mul(f, c), ad.mul(i, ad.neg(g_in)))
        except NonFiniteError as exc:
            raise DivergenceError(t, detail=str(exc)) from None
        f_prev, i_prev = f, i
    theta_T = unflatten(spec, c)
    return theta_T, _query(spec, theta_T, task, cfg.T)


def theorem1_construct(alpha: float, theta: ParamSet, b_f: float = 20.0) -> LstmMetaParams:
    """LSTM gate parameters that make the LSTM update reproduce gradient descent.

    Zero gate weights leave only the biases: the forget gate saturates at
    ``sigmoid(b_f)`` (1 - 2.1e-9 for the default) and the input gate equals
    ``alpha`` exactly.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    return LstmMetaParams(
        theta0=theta,
        W_f=Value(np.zeros((1, 4)), requires_grad=True),
        b_f=Value(np.array([b_f]), requires_grad=True),
        W_i=Value(np.zeros((1, 4)), requires_grad=True),
        b_i=Value(np.array([-math.log((1.0 - alpha) / alpha)]), requires_grad=True),
    )


# ---------------------------------------------------------------------------
# TURTLE


def init_turtle_params(cfg: TurtleConfig, seed: int) -> TurtleParams:
    alpha = None
    if cfg.alpha_mode == "trainable-vector":
        alpha = Value(np.ones(cfg.base.n_params), requires_grad=True)
    return TurtleParams(init_params(cfg.base, seed), init_params(cfg.meta_spec, seed, stream=1), alpha)


def passthrough_phi() -> tuple[MlpSpec, ParamSet]:
    """A 1-2-1 ReLU net computing ``relu(-x) - relu(x) == -x`` exactly."""
    spec = MlpSpec((1, 2, 1))
    phi = ParamSet([
        ("layer0.weight", Value(np.array([[1.0, -1.0]]), requires_grad=True)),
        ("layer0.bias", Value(np.zeros(2), requires_grad=True)),
        ("layer1.weight", Value(np.array([[-1.0], [1.0]]), requires_grad=True)),
        ("layer1.bias", Value(np.zeros(1), requires_grad=True)),
    ])
    return spec, phi


def turtle_adapt(cfg: TurtleConfig, params: TurtleParams, task: SineTask, track_meta: bool = True,
                 meta_spec: MlpSpec | None = None):
    """Stateless learned-optimizer updates ``theta += alpha * g_phi(I)``.

    The feature matrix ``I`` has one row per base-learner weight and columns
    ``[gradient, loss?, time?, history?]``.  ``g_phi`` is applied row-wise
    with shared weights.
    """
    spec = cfg.base
    meta_spec = meta_spec or cfg.meta_spec
    n = spec.n_params
    create = cfg.second_order and track_meta
    theta = flatten(_trainable(params.theta0))
    h = ad.constant(np.zeros(n))
    for t in range(cfg.T):
        pieces = unflatten(spec, theta)
        loss = _support_step(spec, pieces, task, t)
        g = _flat_grad(loss, pieces, create)
        try:
            if not create:
                g = ad.detach(g)
            cols = [_column(g, n)]
            if cfg.use_loss_input:
                cols.append(ad.broadcast(loss if create else ad.detach(loss), (n, 1)))
            if cfg.use_time_input:
                tv = t / cfg.T if cfg.normalize_time else float(t)
                cols.append(ad.constant(np.full((n, 1), tv)))
            if cfg.history != "none":
                cols.append(_column(h if create else ad.detach(h), n))
            feats = cols[0] if len(cols) == 1 else ad.concat(cols)
            update = ad.reshape(forward(meta_spec, params.phi, feats), (n,))
            if params.alpha is not None:
                update = ad.mul(params.alpha, update)
            theta = ad.add(theta, update)
            if cfg.history != "none":
                v = g if cfg.history == "gradients" else update
                h = history_update(h, v, cfg.beta)
        except NonFiniteError as exc:
            raise DivergenceError(t, detail=str(exc)) from None
    theta_T = unflatten(spec, theta)
    return theta_T, _query(spec, theta_T, task, cfg.T)


def history_update(h: Value, v: Value, beta: float) -> Value:
    """Exponential moving average ``beta * h + (1 - beta) * v``."""
    return ad.add(ad.scale(h, beta), ad.scale(v, 1.0 - beta))


# ---------------------------------------------------------------------------
# learner wrappers over flat meta-parameter dicts


def _sub(meta: dict, prefix: str) -> ParamSet:
    cut = len(prefix) + 1
    return ParamSet((name[cut:], v) for name, v in meta.items() if name.startswith(prefix + "/"))


def _prefixed(prefix: str, params: ParamSet) -> dict:
    return {f"{prefix}/{n}": v.data.copy() for n, v in params}


class Learner:
    """Binds a config to the flat ``{name: array}`` meta-parameter layout."""

    algo = "?"
    cfg = None

    def init_meta(self, seed: int) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def adapt(self, meta: dict[str, Value], task: SineTask, track_meta: bool = True):
        raise NotImplementedError


class MamlLearner(Learner):
    def __init__(self, cfg: MamlConfig):
        self.cfg = cfg
        self.algo = "maml" if cfg.second_order else "fomaml"

    def init_meta(self, seed):
        return _prefixed("theta", init_params(self.cfg.base, seed))

    def adapt(self, meta, task, track_meta=True):
        return maml_adapt(self.cfg, _sub(meta, "theta"), task, track_meta)


class LstmLearner(Learner):
    def __init__(self, cfg: LstmMetaConfig):
        self.cfg = cfg
        self.algo = "lstm-enhanced" if cfg.second_order else "lstm"

    def init_meta(self, seed):
        p = init_lstm_params(self.cfg, seed)
        out = _prefixed("theta", p.theta0)
        for name in ("W_f", "b_f", "W_i", "b_i"):
            out[f"lstm/{name}"] = getattr(p, name).data.copy()
        return out

    def adapt(self, meta, task, track_meta=True):
        params = LstmMetaParams(_sub(meta, "theta"), meta["lstm/W_f"], meta["lstm/b_f"],
                                meta["lstm/W_i"], meta["lstm/b_i"])
        return lstm_adapt(self.cfg, params, task, track_meta)


class TurtleLearner(Learner):
    def __init__(self, cfg: TurtleConfig):
        self.cfg = cfg
        self.algo = "turtle" if cfg.second_order else "fo-turtle"

    def init_meta(self, seed):
        p = init_turtle_params(self.cfg, seed)
        out = _prefixed("theta", p.theta0)
        out.update(_prefixed("phi", p.phi))
        if p.alpha is not None:
            out["alpha"] = p.alpha.data.copy()
        return out

    def adapt(self, meta, task, track_meta=True):
        params = TurtleParams(_sub(meta, "theta"), _sub(meta, "phi"), meta.get("alpha"))
        return turtle_adapt(self.cfg, params, task, track_meta)


def make_learner(cfg) -> Learner:
    if isinstance(cfg, MamlConfig):
        return MamlLearner(cfg)
    if isinstance(cfg, LstmMetaConfig):
        return LstmLearner(cfg)
    if isinstance(cfg, TurtleConfig):
        return TurtleLearner(cfg)
    raise ConfigError(f"no learner for {type(cfg).__name__}")


# ---------------------------------------------------------------------------
# outer loop


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self.m[name], self.v[name] = m, v
            out[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
        return out

    def to_json(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon,
            "step": self.step,
            "m": {k: a.ravel().tolist() for k, a in self.m.items()},
            "v": {k: a.ravel().tolist() for k, a in self.v.items()},
        }

    @classmethod
    def from_json(cls, obj: dict, shapes: dict[str, tuple]) -> "AdamState":
        st = cls(obj["lr"], obj["beta1"], obj["beta2"], obj["epsilon"], obj["step"])
        st.m = {k: np.asarray(a, dtype=np.float64).reshape(shapes[k]) for k, a in obj["m"].items()}
        st.v = {k: np.asarray(a, dtype=np.float64).reshape(shapes[k]) for k, a in obj["v"].items()}
        return st


def meta_gradient(learner: Learner, meta: dict[str, np.ndarray], batch, first_index: int = 0):
    """Gradient of the summed query loss over ``batch``.

    Tasks are adapted one at a time and their gradients accumulated in
    ascending index order.
    """
    total = {name: np.zeros_like(a) for name, a in meta.items()}
    loss_sum = 0.0
    for j, task in enumerate(batch):
        leaves = {name: Value(a, requires_grad=True) for name, a in meta.items()}
        try:
            with np.errstate(all="ignore"):
                _, loss = learner.adapt(leaves, task)
        except DivergenceError as exc:
            exc.task_index = first_index + j
            raise
        names = list(leaves)
        gs = ad.grad(loss, [leaves[n] for n in names])
        for name, g in zip(names, gs):
            total[name] = total[name] + g.data
        loss_sum += loss.item()
    return total, loss_sum


def outer_step(adam: AdamState, meta: dict[str, np.ndarray], batch, learner: Learner, first_index: int = 0):
    """One Adam update of the meta-parameters from a meta-batch of tasks."""
    if len(batch) < 1:
        raise ConfigError("meta-batch must contain at least one task")
    grads, loss_sum = meta_gradient(learner, meta, batch, first_index)
    return adam, adam.update(meta, grads), loss_sum
