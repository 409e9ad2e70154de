"""Executable checks shared by ``metaturtle verify`` and the test-suite.

Each check returns a :class:`CheckResult` with the observed error magnitude
and the tolerance it was held to.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .errors import DivergenceError
from .learners import (LstmMetaConfig, MamlConfig, TurtleConfig, TurtleParams, lstm_adapt, maml_adapt,
                       passthrough_phi, theorem1_construct, turtle_adapt)
from .network import SINE_SPEC, MlpSpec, ParamSet, init_params
from .tasks import make_streams, sample_task, task_rng


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"[{status}] {self.name}: error={self.error:.3e} tol={self.tolerance:.0e}{extra}"


# ---------------------------------------------------------------------------
# random op compositions


def composition(seed: int):
    """A random scalar function of a 12-vector that uses every differentiable op.

    Returns ``(f, x0)`` with ``x0`` drawn uniformly from [-1, 1].
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    x0 = rng.uniform(-1.0, 1.0, 12)
    offset = rng.uniform(-0.5, 0.5, (2, 2))
    c = float(rng.uniform(0.5, 2.0))
    unary = [ad.sigmoid, ad.relu, ad.square, ad.neg, lambda v: ad.scale(v, c)]
    order = rng.permutation(len(unary))

    def f(x: Value) -> Value:
        a = ad.reshape(ad.take(x, 0, 6), (2, 3))
        b = ad.reshape(ad.take(x, 6, 12), (3, 2))
        m = ad.matmul(a, b)
        lin = ad.linear(a, b, ad.take(x, 4, 6))
        e = ad.sub(ad.add(m, ad.mul(lin, ad.sigmoid(m))), ad.constant(offset))
        for i in order:
            e = unary[i](e)
        cat = ad.concat([e, ad.transpose(ad.take(a, 0, 2))])
        p = ad.pad(ad.take(cat, 1, 3), 1, 5)
        s = ad.broadcast(ad.mean(p), (2, 5))
        return ad.sum(ad.add(ad.square(p), ad.mul(s, p)))

    return f, x0


def composition_ops(seed: int = 0) -> set[str]:
    f, x0 = composition(seed)
    with ad.Graph() as tape:
        f(ad.leaf(x0))
    return {n.op.name for n in tape.nodes}


def check_finite_differences(seeds=range(100), tol1: float = 1e-5, tol2: float = 1e-4):
    worst1 = max(ad.finite_difference_check(*composition(s), order=1) for s in seeds)
    worst2 = max(ad.finite_difference_check(*composition(s), order=2) for s in seeds)
    n = len(seeds)
    return [CheckResult(f"finite-difference order 1 ({n} compositions)", worst1 <= tol1, worst1, tol1),
            CheckResult(f"finite-difference order 2 ({n} compositions)", worst2 <= tol2, worst2, tol2)]


def check_detachment(tol: float = 0.0) -> CheckResult:
    """Any path through ``detach`` must contribute exactly zero."""
    x = ad.leaf(np.array([0.3, -1.2, 2.0]))
    out = ad.add(ad.sum(ad.square(ad.detach(x))), ad.sum(ad.mul(ad.detach(x), ad.constant(np.ones(3)))))
    if out.requires_grad:
        (g,) = ad.grad(out, [x])
        err = float(np.abs(g.data).max())
    else:
        err = 0.0
    return CheckResult("detach contributes zero gradient", err <= tol, err, tol)


# ---------------------------------------------------------------------------
# learner equivalences


def max_param_deviation(a: ParamSet, b: ParamSet) -> float:
    return max(float(np.abs(x.data - y.data).max()) for x, y in zip(a.values(), b.values()))


def check_theorem1(alpha: float = 0.01, n_tasks: int = 20, T: int = 10, k: int = 5, seed: int = 0,
                   tol: float = 1e-6) -> CheckResult:
    """The constructed LSTM reproduces MAML's trajectory step by step."""
    worst = 0.0
    params_for = None
    diverged = 0
    for j in range(n_tasks):
        task = sample_task(task_rng(seed, "test", j), k)
        theta = init_params(SINE_SPEC, seed + 1000 + j)
        params_for = theorem1_construct(alpha, theta)
        for t in range(1, T + 1):
            outcome = []
            for run in (lambda: maml_adapt(MamlConfig(T=t, alpha=alpha, second_order=False), theta, task, False),
                        lambda: lstm_adapt(LstmMetaConfig(T=t), params_for, task, False)):
                try:
                    with np.errstate(all="ignore"):
                        outcome.append(run()[0])
                except DivergenceError:
                    outcome.append(None)
            if outcome[0] is None and outcome[1] is None:
                # both trajectories blew up together: nothing left to compare
                diverged += 1
                break
            if outcome[0] is None or outcome[1] is None:
                worst = math.inf
                break
            worst = max(worst, max_param_deviation(*outcome))
    b_i = float(params_for.b_i.data[0])
    return CheckResult(f"lstm subsumes maml (alpha={alpha}, {n_tasks} tasks, T={T})", worst <= tol, worst, tol,
                       detail=f"b_i={b_i:.10g} b_f={float(params_for.b_f.data[0]):g}"
                       + (f" (both diverged on {diverged} tasks)" if diverged else ""))


def check_turtle_passthrough(n_tasks: int = 5, T: int = 3, seed: int = 0, tol: float = 1e-12,
                             base: MlpSpec = MlpSpec((1, 4, 1))) -> CheckResult:
    """A -identity meta-network with unit step sizes is plain gradient descent (lr 1)."""
    spec, phi = passthrough_phi()
    cfg = TurtleConfig(T=T, meta_hidden_layers=1, meta_hidden_width=2, base=base)
    worst = 0.0
    for j in range(n_tasks):
        task = sample_task(task_rng(seed, "val", j), 5)
        theta = init_params(base, seed + j)
        with np.errstate(all="ignore"):
            gd, _ = maml_adapt(MamlConfig(T=T, alpha=1.0, base=base), theta, task, track_meta=False)
            tu, _ = turtle_adapt(cfg, TurtleParams(theta, phi), task, track_meta=False, meta_spec=spec)
        worst = max(worst, max_param_deviation(gd, tu))
    return CheckResult("TURTLE pass-through equals gradient descent", worst <= tol, worst, tol)


def check_stream_determinism(seed: int = 0) -> CheckResult:
    tr, va, _ = make_streams(5, 50, 20, 20, seed)
    fresh_val = make_streams(5, 50, 20, 20, seed)[1]
    before = va[7].to_json()
    for t in tr:
        pass
    after = va[7].to_json()
    same = before == after == fresh_val[7].to_json()
    other = make_streams(5, 50, 20, 20, seed + 1)[1][7].to_json() != before
    ok = same and other
    return CheckResult("index-addressed task seeding", ok, 0.0 if ok else 1.0, 0.0)


def run_all(theorem_alpha: float = 0.01, fd_seeds=range(100)) -> list[CheckResult]:
    results = check_finite_differences(fd_seeds)
    results.append(check_detachment())
    results.append(check_theorem1(alpha=theorem_alpha))
    results.append(check_turtle_passthrough())
    results.append(check_stream_determinism())
    return results


def theorem1_bias(alpha: float) -> float:
    return -math.log((1.0 - alpha) / alpha)
