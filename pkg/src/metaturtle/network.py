"""Functional multilayer perceptrons over explicit parameter sets."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .errors import ShapeError

_ACTIVATIONS = {"relu": ad.relu, "sigmoid": ad.sigmoid, "identity": None}


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    hidden: str = "relu"
    output: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError(f"bad layer widths {self.widths}")
        for act in (self.hidden, self.output):
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Canonical (name, shape) order: layer index, weight before bias."""
        out = []
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            out.append((f"layer{i}.weight", (fan_in, fan_out)))
            out.append((f"layer{i}.bias", (fan_out,)))
        return out

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for _, s in self.shapes())


SINE_SPEC = MlpSpec((1, 40, 40, 1))


def meta_net_spec(in_width: int, hidden_layers: int = 5, hidden_width: int = 20) -> MlpSpec:
    if hidden_layers < 1:
        raise ValueError("meta-network needs at least one hidden layer")
    return MlpSpec((in_width,) + (hidden_width,) * hidden_layers + (1,))


class ParamSet:
    """Ordered named collection of graph values."""

    def __init__(self, items):
        self._items: list[tuple[str, Value]] = [(n, v) for n, v in items]

    def __iter__(self) -> Iterator[tuple[str, Value]]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, name: str) -> Value:
        for n, v in self._items:
            if n == name:
                return v
        raise KeyError(name)

    def names(self) -> list[str]:
        return [n for n, _ in self._items]

    def values(self) -> list[Value]:
        return [v for _, v in self._items]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: v.data for n, v in self._items}

    @property
    def n_params(self) -> int:
        return sum(v.data.size for _, v in self._items)

    def detach(self) -> "ParamSet":
        return ParamSet((n, ad.detach(v)) for n, v in self._items)

    def clone(self, requires_grad: bool = True) -> "ParamSet":
        """Fresh leaves holding copies of the current values."""
        return ParamSet((n, Value(v.data.copy(), requires_grad=requires_grad)) for n, v in self._items)

    def map(self, fn) -> "ParamSet":
        return ParamSet((n, fn(n, v)) for n, v in self._items)

    def allclose(self, other: "ParamSet", atol: float = 0.0) -> bool:
        return self.names() == other.names() and all(
            a.shape == b.shape and np.allclose(a.data, b.data, rtol=0.0, atol=atol)
            for a, b in zip(self.values(), other.values()))

    def to_json(self) -> dict:
        return {n: {"shape": list(v.shape), "data": v.data.ravel().tolist()} for n, v in self._items}

    @classmethod
    def from_json(cls, obj: dict, requires_grad: bool = False) -> "ParamSet":
        return cls((n, Value(np.asarray(e["data"], dtype=np.float64).reshape(e["shape"]),
                             requires_grad=requires_grad)) for n, e in obj.items())

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], requires_grad: bool = False) -> "ParamSet":
        return cls((n, Value(a, requires_grad=requires_grad)) for n, a in arrays.items())

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def init_params(spec: MlpSpec, seed: int, stream: int = 0) -> ParamSet:
    """Fan-in uniform weights ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, zero biases.

    ``stream`` separates independent networks initialised from one seed.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x1417, int(stream)])))
    items = []
    for name, shape in spec.shapes():
        if name.endswith(".weight"):
            bound = 1.0 / math.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        items.append((name, Value(data, requires_grad=True)))
    return ParamSet(items)


def _check_matches(spec: MlpSpec, params: ParamSet) -> None:
    expected = spec.shapes()
    got = [(n, v.shape) for n, v in params]
    if [(n, tuple(s)) for n, s in expected] != got:
        raise ShapeError("forward", tuple(s for _, s in expected), tuple(s for _, s in got))


def forward(spec: MlpSpec, params: ParamSet, x) -> Value:
    """Affine + nonlinearity stack; rows of ``x`` are examples."""
    x = x if isinstance(x, Value) else ad.constant(x)
    if x.data.ndim != 2 or x.shape[1] != spec.widths[0]:
        raise ShapeError("forward", x.shape, (None, spec.widths[0]))
    _check_matches(spec, params)
    vals = params.values()
    h = x
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        h = ad.linear(h, vals[2 * i], vals[2 * i + 1])
        act = _ACTIVATIONS[spec.output if i == last else spec.hidden]
        if act is not None:
            h = act(h)
    return h


def flatten(params: ParamSet) -> Value:
    pieces = [ad.reshape(v, (v.data.size,)) for _, v in params]
    return ad.concat(pieces)


def unflatten(spec: MlpSpec, vector: Value) -> ParamSet:
    n = spec.n_params
    if vector.shape != (n,):
        raise ShapeError("unflatten", vector.shape, (n,))
    items, start = [], 0
    for name, shape in spec.shapes():
        size = math.prod(shape)
        items.append((name, ad.reshape(ad.take(vector, start, start + size), shape)))
        start += size
    return ParamSet(items)
