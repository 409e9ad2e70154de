"""Elementwise kernels behind the autodiff ops.

Two interchangeable backends: numba ``@njit`` loops and plain numpy.  The
numba path is used when numba imports and ``METATURTLE_NUMBA`` is not ``0``;
even then it only takes relu/step calls of at least ``NUMBA_MIN_SIZE``
elements, where it beats numpy.  Both produce bit-identical results for relu/step/all_finite; sigmoid agrees
to the last ulp (see tests/test_kernels.py).
"""
from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import expit

_want = os.environ.get("METATURTLE_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    if not _want:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# -- numpy reference path ---------------------------------------------------

def np_relu(a):
    return np.maximum(a, 0.0)


def np_step(a):
    return (a > 0.0).astype(np.float64)


def np_sigmoid(a):
    return expit(a)


def np_all_finite(a) -> bool:
    if a.ndim == 0:
        return math.isfinite(float(a))
    return bool(np.isfinite(a).all())


def np_linear(x, w, b):
    out = x @ w
    out += b
    return out


# -- numba path ---------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_relu(flat, out):
        for i in range(flat.size):
            v = flat[i]
            out[i] = v if v > 0.0 else 0.0

    @njit(cache=True)
    def _nb_step(flat, out):
        for i in range(flat.size):
            out[i] = 1.0 if flat[i] > 0.0 else 0.0

    @njit(cache=True)
    def _nb_sigmoid(flat, out):
        for i in range(flat.size):
            v = flat[i]
            if v >= 0.0:
                out[i] = 1.0 / (1.0 + math.exp(-v))
            else:
                e = math.exp(v)
                out[i] = e / (1.0 + e)

    @njit(cache=True)
    def _nb_all_finite(flat):
        for i in range(flat.size):
            if not math.isfinite(flat[i]):
                return False
        return True

    def _elementwise(kernel, a):
        shape = np.shape(a)
        flat = np.ascontiguousarray(a, dtype=np.float64).reshape(-1)
        out = np.empty_like(flat)
        kernel(flat, out)
        return out.reshape(shape)

    def nb_relu(a):
        return _elementwise(_nb_relu, a)

    def nb_step(a):
        return _elementwise(_nb_step, a)

    def nb_sigmoid(a):
        return _elementwise(_nb_sigmoid, a)

    def nb_all_finite(a) -> bool:
        if a.ndim == 0:
            return math.isfinite(float(a))
        return bool(_nb_all_finite(np.ascontiguousarray(a).reshape(-1)))

    # numba's ~3us dispatch loses to numpy ufuncs on small arrays, and expit /
    # isfinite are already SIMD loops, so only large relu/step calls go to numba
    NUMBA_MIN_SIZE = 4096

    def relu(a):
        return nb_relu(a) if a.size >= NUMBA_MIN_SIZE else np_relu(a)

    def step(a):
        return nb_step(a) if a.size >= NUMBA_MIN_SIZE else np_step(a)

    sigmoid, all_finite = np_sigmoid, np_all_finite
else:
    relu, step, sigmoid, all_finite = np_relu, np_step, np_sigmoid, np_all_finite

linear = np_linear
