"""Reverse-mode automatic differentiation with gradients as graph nodes.

Every op carries a single vector-Jacobian rule written against a small
namespace of primitive functions.  The rule is evaluated either against the
graph namespace (``create_graph=True``: cotangents are themselves ``Value``
nodes and can be differentiated again) or against the raw numpy namespace
(``create_graph=False``: cotangents are plain arrays, which is much cheaper).

Broadcasting is deliberately strict: elementwise ops need identical shapes,
and the only implicit coercion is the explicit :func:`broadcast` of a scalar.
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels as K
from .errors import GradientError, NonFiniteError, ShapeError

__all__ = [
    "Value", "Graph", "constant", "leaf", "detach", "grad",
    "add", "sub", "mul", "neg", "scale", "matmul", "transpose", "concat",
    "take", "pad", "broadcast", "reshape", "relu", "sigmoid", "square",
    "sum", "mean", "linear", "sin", "mse_loss", "finite_difference_check",
]

CHECK_FINITE = True

# Negative-control hook used by ``metaturtle verify --break-detach``.
_faults: set[str] = set()
# Active op recorders (see Graph).
_recorders: list["Graph"] = []
# Creation order; a node can only depend on nodes with a smaller ``seq``.
_seq = itertools.count()


def set_fault(name: str, enabled: bool = True) -> None:
    if enabled:
        _faults.add(name)
    else:
        _faults.discard(name)


class Value:
    """A tensor bound into the differentiation graph.

    ``op is None`` marks a leaf.  Non-leaf nodes only exist when at least
    one input required a gradient; otherwise ops return fresh constants.
    """

    __slots__ = ("data", "op", "parents", "attrs", "requires_grad", "seq")

    def __init__(self, data, requires_grad: bool = False, op: "Op | None" = None,
                 parents: tuple = (), attrs: dict | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.seq = next(_seq)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        kind = "leaf" if self.op is None else self.op.name
        return f"Value(shape={self.shape}, {kind}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Value):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Value:
    return Value(data, requires_grad=False)


def leaf(data) -> Value:
    """A fresh differentiable leaf (copies ``data``)."""
    return Value(np.array(data, dtype=np.float64), requires_grad=True)


def detach(v: Value) -> Value:
    if "detach" in _faults:
        return v
    return Value(v.data, requires_grad=False)


class Graph:
    """Append-only record of the ops executed while it is active.

    ``with Graph() as g: ...`` captures every non-leaf node in execution
    order; :meth:`replay` recomputes each node from its recorded inputs.
    """

    def __init__(self):
        self.nodes: list[Value] = []

    def __enter__(self) -> "Graph":
        _recorders.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _recorders.remove(self)

    def replay(self) -> bool:
        """True iff every recorded value is reproduced bit-identically."""
        for node in self.nodes:
            again = node.op.forward(*(p.data for p in node.parents), **node.attrs)
            if again.shape != node.data.shape or not np.array_equal(again, node.data):
                return False
        return True


class Op:
    name = "op"
    differentiable = True
    # False for ops that cannot turn finite inputs into inf/nan.
    may_overflow = True

    def check(self, *xs, **attrs) -> None:
        pass

    def forward(self, *xs, **attrs) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, F, g, ins, out, attrs, needs) -> tuple:
        """Cotangents for each input; entries with ``needs[k]`` false may be None."""
        raise NotImplementedError


def _apply(op: Op, inputs: Sequence[Value], attrs: dict | None = None) -> Value:
    attrs = attrs or {}
    arrays = [v.data for v in inputs]
    op.check(*arrays, **attrs)
    out = op.forward(*arrays, **attrs)
    if CHECK_FINITE and op.may_overflow and not K.all_finite(out):
        raise NonFiniteError(op.name)
    if any(v.requires_grad for v in inputs):
        node = Value(out, True, op, tuple(inputs), attrs)
        for rec in _recorders:
            rec.nodes.append(node)
        return node
    return Value(out)


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(name, a.shape, b.shape)


# ---------------------------------------------------------------------------
# ops


class _Add(Op):
    name = "add"

    def check(self, a, b):
        _same_shape(self.name, a, b)

    def forward(self, a, b):
        return a + b

    def vjp(self, F, g, ins, out, attrs, needs):
        return g, g


class _Sub(Op):
    name = "sub"

    def check(self, a, b):
        _same_shape(self.name, a, b)

    def forward(self, a, b):
        return a - b

    def vjp(self, F, g, ins, out, attrs, needs):
        return g, F.neg(g)


class _Mul(Op):
    name = "mul"

    def check(self, a, b):
        _same_shape(self.name, a, b)

    def forward(self, a, b):
        return a * b

    def vjp(self, F, g, ins, out, attrs, needs):
        a, b = ins
        return (F.mul(g, b) if needs[0] else None), (F.mul(g, a) if needs[1] else None)


class _Neg(Op):
    name = "neg"
    may_overflow = False

    def forward(self, a):
        return -a

    def vjp(self, F, g, ins, out, attrs, needs):
        return (F.neg(g),)


class _Scale(Op):
    name = "scale"

    def forward(self, a, c):
        return a * c

    def vjp(self, F, g, ins, out, attrs, needs):
        return (F.scale(g, attrs["c"]),)


class _Matmul(Op):
    name = "matmul"

    def check(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(self.name, a.shape, b.shape)

    def forward(self, a, b):
        return a @ b

    def vjp(self, F, g, ins, out, attrs, needs):
        a, b = ins
        return (F.matmul(g, F.transpose(b)) if needs[0] else None,
                F.matmul(F.transpose(a), g) if needs[1] else None)


class _Transpose(Op):
    name = "transpose"
    may_overflow = False

    def check(self, a):
        if a.ndim != 2:
            raise ShapeError(self.name, a.shape)

    def forward(self, a):
        return np.ascontiguousarray(a.T)

    def vjp(self, F, g, ins, out, attrs, needs):
        return (F.transpose(g),)


class _Concat(Op):
    name = "concat"
    may_overflow = False

    def check(self, *xs):
        lead = xs[0].shape[:-1]
        for x in xs:
            if x.ndim == 0 or x.shape[:-1] != lead:
                raise ShapeError(self.name, *(y.shape for y in xs))

    def forward(self, *xs):
        return np.concatenate(xs, axis=-1)

    def vjp(self, F, g, ins, out, attrs, needs):
        grads, start = [], 0
        for x in ins:
            stop = start + _shape(x)[-1]
            grads.append(F.take(g, start, stop))
            start = stop
        return tuple(grads)


class _Take(Op):
    """Slice ``[start:stop]`` along the last axis."""

    name = "take"
    may_overflow = False

    def check(self, a, start, stop):
        if a.ndim == 0 or not 0 <= start <= stop <= a.shape[-1]:
            raise ShapeError(self.name, a.shape, (start, stop))

    def forward(self, a, start, stop):
        return a[..., start:stop].copy()

    def vjp(self, F, g, ins, out, attrs, needs):
        return (F.pad(g, attrs["start"], _shape(ins[0])[-1]),)


class _Pad(Op):
    """Zero-pad the last axis to ``total`` with the input placed at ``start``."""

    name = "pad"
    may_overflow = False

    def check(self, a, start, total):
        if a.ndim == 0 or start < 0 or start + a.shape[-1] > total:
            raise ShapeError(self.name, a.shape, (start, total))

    def forward(self, a, start, total):
        out = np.zeros(a.shape[:-1] + (total,))
        out[..., start:start + a.shape[-1]] = a
        return out

    def vjp(self, F, g, ins, out, attrs, needs):
        start = attrs["start"]
        return (F.take(g, start, start + _shape(ins[0])[-1]),)


class _Broadcast(Op):
    """Scalar to an arbitrary shape; the only broadcast the engine allows."""

    name = "broadcast"
    may_overflow = False

    def check(self, a, shape):
        if a.ndim != 0:
            raise ShapeError(self.name, a.shape, shape)

    def forward(self, a, shape):
        return np.full(shape, float(a))

    def vjp(self, F, g, ins, out, attrs, needs):
        return (F.sum(g),)


class _Reshape(Op):
    name = "reshape"
    may_overflow = False

    def check(self, a, shape):
        if math.prod(shape) != a.size:
            raise ShapeError(self.name, a.shape, shape)

    def forward(self, a, shape):
        return a.reshape(shape)

    def vjp(self, F, g, ins, out, attrs, needs):
        return (F.reshape(g, _shape(ins[0])),)


class _Relu(Op):
    name = "relu"
    may_overflow = False

    def forward(self, a):
        return K.relu(a)

    def vjp(self, F, g, ins, out, attrs, needs):
        # relu'(0) := 0; the mask is piecewise constant so it has zero derivative.
        return (F.mul(g, F.const(K.step(_data(ins[0])))),)


class _Sigmoid(Op):
    name = "sigmoid"
    may_overflow = False

    def forward(self, a):
        return K.sigmoid(a)

    def vjp(self, F, g, ins, out, attrs, needs):
        one_minus = F.sub(F.const(np.ones(_shape(out))), out)
        return (F.mul(g, F.mul(out, one_minus)),)


class _Square(Op):
    name = "square"

    def forward(self, a):
        return a * a

    def vjp(self, F, g, ins, out, attrs, needs):
        return (F.mul(g, F.scale(ins[0], 2.0)),)


class _Sum(Op):
    name = "sum"

    def forward(self, a):
        return np.asarray(a.sum())

    def vjp(self, F, g, ins, out, attrs, needs):
        return (F.broadcast(g, _shape(ins[0])),)


class _Mean(Op):
    name = "mean"

    def check(self, a):
        if a.size == 0:
            raise ShapeError(self.name, a.shape)

    def forward(self, a):
        return np.asarray(a.mean())

    def vjp(self, F, g, ins, out, attrs, needs):
        shape = _shape(ins[0])
        return (F.broadcast(F.scale(g, 1.0 / math.prod(shape)), shape),)


class _Linear(Op):
    """Fused ``x @ w + b`` with ``b`` added to every row."""

    name = "linear"

    def check(self, x, w, b):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(self.name, x.shape, w.shape)
        if b.shape != (w.shape[1],):
            raise ShapeError(self.name, w.shape, b.shape)

    def forward(self, x, w, b):
        return K.linear(x, w, b)

    def vjp(self, F, g, ins, out, attrs, needs):
        x, w, _ = ins
        return (F.matmul(g, F.transpose(w)) if needs[0] else None,
                F.matmul(F.transpose(x), g) if needs[1] else None,
                F.colsum(g) if needs[2] else None)


class _Sin(Op):
    name = "sin"
    may_overflow = False
    differentiable = False

    def forward(self, a):
        return np.sin(a)

    def vjp(self, F, g, ins, out, attrs, needs):
        raise GradientError("sin has no derivative in this engine")


_ADD, _SUB, _MUL, _NEG, _SCALE = _Add(), _Sub(), _Mul(), _Neg(), _Scale()
_MATMUL, _TRANSPOSE, _CONCAT, _TAKE, _PAD = _Matmul(), _Transpose(), _Concat(), _Take(), _Pad()
_BROADCAST, _RESHAPE, _RELU, _SIGMOID = _Broadcast(), _Reshape(), _Relu(), _Sigmoid()
_SQUARE, _SUM, _MEAN, _LINEAR, _SIN = _Square(), _Sum(), _Mean(), _Linear(), _Sin()


def _as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def add(a, b) -> Value:
    return _apply(_ADD, (_as_value(a), _as_value(b)))


def sub(a, b) -> Value:
    return _apply(_SUB, (_as_value(a), _as_value(b)))


def mul(a, b) -> Value:
    return _apply(_MUL, (_as_value(a), _as_value(b)))


def neg(a) -> Value:
    return _apply(_NEG, (_as_value(a),))


def scale(a, c: float) -> Value:
    return _apply(_SCALE, (_as_value(a),), {"c": float(c)})


def matmul(a, b) -> Value:
    return _apply(_MATMUL, (_as_value(a), _as_value(b)))


def transpose(a) -> Value:
    return _apply(_TRANSPOSE, (_as_value(a),))


def concat(xs: Iterable) -> Value:
    return _apply(_CONCAT, tuple(_as_value(x) for x in xs))


def take(a, start: int, stop: int) -> Value:
    return _apply(_TAKE, (_as_value(a),), {"start": int(start), "stop": int(stop)})


def pad(a, start: int, total: int) -> Value:
    return _apply(_PAD, (_as_value(a),), {"start": int(start), "total": int(total)})


def broadcast(a, shape) -> Value:
    return _apply(_BROADCAST, (_as_value(a),), {"shape": tuple(shape)})


def reshape(a, shape) -> Value:
    return _apply(_RESHAPE, (_as_value(a),), {"shape": tuple(shape)})


def relu(a) -> Value:
    return _apply(_RELU, (_as_value(a),))


def sigmoid(a) -> Value:
    return _apply(_SIGMOID, (_as_value(a),))


def square(a) -> Value:
    return _apply(_SQUARE, (_as_value(a),))


def sum(a) -> Value:  # noqa: A001 - mirrors the numpy name
    return _apply(_SUM, (_as_value(a),))


def mean(a) -> Value:
    return _apply(_MEAN, (_as_value(a),))


def linear(x, w, b) -> Value:
    return _apply(_LINEAR, (_as_value(x), _as_value(w), _as_value(b)))


def sin(a) -> Value:
    return _apply(_SIN, (_as_value(a),))


def mse_loss(pred: Value, target) -> Value:
    target = np.asarray(target, dtype=np.float64)
    if pred.data.size != target.size or target.size == 0:
        raise ShapeError("mse_loss", pred.shape, target.shape)
    return mean(square(sub(pred, target.reshape(pred.shape))))


# ---------------------------------------------------------------------------
# vjp namespaces


def _shape(x) -> tuple:
    return x.shape


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Value) else x


class _GraphNS:
    """Primitive namespace over ``Value`` nodes (higher-order capable)."""

    add, neg, mul, sub, scale = staticmethod(add), staticmethod(neg), staticmethod(mul), staticmethod(sub), staticmethod(scale)
    matmul, transpose, take, pad = staticmethod(matmul), staticmethod(transpose), staticmethod(take), staticmethod(pad)
    broadcast, reshape, sum = staticmethod(broadcast), staticmethod(reshape), staticmethod(sum)
    const = staticmethod(constant)

    @staticmethod
    def colsum(g: Value) -> Value:
        ones = constant(np.ones((1, g.shape[0])))
        return reshape(matmul(ones, g), (g.shape[1],))


class _RawNS:
    """The same primitives over bare arrays; used when no graph is needed."""

    add = staticmethod(np.add)
    neg = staticmethod(np.negative)
    mul = staticmethod(np.multiply)
    sub = staticmethod(np.subtract)
    matmul = staticmethod(np.matmul)
    sum = staticmethod(lambda g: np.asarray(g.sum()))

    @staticmethod
    def scale(g, c):
        return g * c

    @staticmethod
    def transpose(g):
        return g.T

    @staticmethod
    def take(g, start, stop):
        return g[..., start:stop]

    @staticmethod
    def pad(g, start, total):
        out = np.zeros(g.shape[:-1] + (total,))
        out[..., start:start + g.shape[-1]] = g
        return out

    @staticmethod
    def broadcast(g, shape):
        return np.full(shape, float(g))

    @staticmethod
    def reshape(g, shape):
        return np.reshape(g, shape)

    @staticmethod
    def const(x):
        return x

    @staticmethod
    def colsum(g):
        return g.sum(axis=0)


# ---------------------------------------------------------------------------
# reverse pass


def _relevant_order(output: Value, targets: set[int], oldest: int) -> list[Value]:
    """Topological order (output first) of nodes lying on a path to a target.

    Nodes created before the oldest target cannot descend from any target,
    so the search never enters them.
    """
    reaches: dict[int, bool] = {}
    post: list[Value] = []
    stack: list[tuple[Value, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        nid = id(node)
        if expanded:
            hit = nid in targets or any(reaches.get(id(p), False) for p in node.parents)
            reaches[nid] = hit
            if hit:
                post.append(node)
            continue
        if nid in reaches:
            continue
        reaches[nid] = False
        stack.append((node, True))
        if node.op is not None:
            for p in node.parents:
                if p.requires_grad and p.seq >= oldest and id(p) not in reaches:
                    stack.append((p, False))
    post.reverse()
    return post


def grad(output: Value, wrt: Sequence[Value], create_graph: bool = False) -> list[Value]:
    """Gradients of a scalar ``output`` with respect to each entry of ``wrt``.

    With ``create_graph`` the results are graph nodes and may be
    differentiated again; otherwise they are detached constants.
    Entries unreachable from ``output`` receive zeros.
    """
    if output.data.shape != ():
        raise GradientError(f"grad needs a scalar output, got shape {output.shape}")
    for w in wrt:
        if not w.requires_grad:
            raise GradientError("grad requested for a value that does not require grad")
    targets = {id(w) for w in wrt}
    order = _relevant_order(output, targets, min(w.seq for w in wrt)) if output.requires_grad and wrt else []
    relevant = {id(n) for n in order}

    F = _GraphNS if create_graph else _RawNS
    cot: dict[int, object] = {id(output): constant(1.0) if create_graph else np.asarray(1.0)}
    for node in order:
        g = cot.get(id(node))
        if g is None or node.op is None:
            continue
        if not node.op.differentiable:
            raise GradientError(f"op '{node.op.name}' is not differentiable")
        if create_graph:
            ins, out = node.parents, node
        else:
            ins, out = [p.data for p in node.parents], node.data
        needs = [p.requires_grad and id(p) in relevant for p in node.parents]
        contribs = node.op.vjp(F, g, ins, out, node.attrs, needs)
        for p, c in zip(node.parents, contribs):
            if not p.requires_grad or c is None:
                continue
            pid = id(p)
            prev = cot.get(pid)
            cot[pid] = c if prev is None else F.add(prev, c)
        if id(node) not in targets:
            del cot[id(node)]

    result = []
    for w in wrt:
        g = cot.get(id(w))
        if g is None:
            result.append(constant(np.zeros(w.shape)))
        elif create_graph:
            result.append(g)
        else:
            result.append(Value(np.array(g, dtype=np.float64).reshape(w.shape)))
    return result


# ---------------------------------------------------------------------------
# numerical oracle


def finite_difference_check(f: Callable[[Value], Value], x, order: int = 1,
                            eps: float = 1e-6) -> float:
    """Max relative error of analytic vs central-difference derivatives.

    ``f`` maps a flat ``Value`` vector to a scalar ``Value``.  Order 1
    compares the gradient against differences of ``f``; order 2 compares
    the Hessian (gradient of the gradient) against differences of the
    analytic gradient.  Error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size

    def value_at(p):
        out = f(constant(p)).item()
        if not math.isfinite(out):
            raise NonFiniteError("finite_difference_check")
        return out

    def grad_at(p):
        v = leaf(p)
        (g,) = grad(f(v), [v])
        if not K.all_finite(g.data):
            raise NonFiniteError("finite_difference_check")
        return g.data.ravel()

    if order == 1:
        analytic = grad_at(x)
        numeric = np.empty(n)
        for i in range(n):
            e = np.zeros(n)
            e[i] = eps
            numeric[i] = (value_at(x + e) - value_at(x - e)) / (2 * eps)
    else:
        v = leaf(x)
        (g,) = grad(f(v), [v], create_graph=True)
        analytic = np.empty((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            if g.requires_grad:
                (row,) = grad(sum(mul(g, constant(e.reshape(g.shape)))), [v])
                analytic[i] = row.data.ravel()
            else:
                analytic[i] = 0.0
        numeric = np.empty((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = eps
            numeric[:, i] = (grad_at(x + e) - grad_at(x - e)) / (2 * eps)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)), initial=0.0))
