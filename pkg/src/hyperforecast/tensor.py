"""Dense row-major float64 tensors and the kernels the model is built from.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float64.
The functions here add the shape contracts (and the errors) that the rest of
the package relies on. The recurrent hot kernels (per-sample matvec and the
fused GRU/LSTM gate updates) come from the compiled ``_kernels`` extension
when it is importable and from ``_kernels_py`` otherwise. Set
``HYPERFORECAST_KERNELS=python`` to force the fallback.
"""
import os

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError

if os.environ.get("HYPERFORECAST_KERNELS", "").lower() == "python":
    from . import _kernels_py as kernels
else:
    try:
        from . import _kernels as kernels
    except ImportError:  # extension not built
        from . import _kernels_py as kernels

BACKEND = kernels.BACKEND
DTYPE = np.float64

_UNARY = {
    "sigmoid": None,  # filled below, needs the stable helper
    "tanh": np.tanh,
    "exp": np.exp,
    "neg": np.negative,
}
_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def as_tensor(values):
    """Copy-free conversion to a contiguous float64 array of rank >= 1."""
    t = np.ascontiguousarray(values, dtype=DTYPE)
    if t.ndim == 0:
        t = t.reshape(1)
    return t


def _shape_str(t):
    return "[" + "x".join(str(d) for d in np.shape(t)) + "]"


def sigmoid(x):
    """Logistic function, evaluated without overflow for large |x|."""
    x = np.asarray(x, dtype=DTYPE)
    return np.exp(-np.logaddexp(0.0, -x))


_UNARY["sigmoid"] = sigmoid


def elementwise(op, a, b=None):
    """Apply ``op`` per element.

    Unary ops: sigmoid, tanh, exp, neg. Binary ops: add, sub, mul, which
    require identical shapes.
    """
    a = as_tensor(a)
    if op in _UNARY:
        if b is not None:
            raise ContractError(f"{op} is unary")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        b = as_tensor(b)
        if a.shape != b.shape:
            raise DimensionError(f"{op}: shapes {_shape_str(a)} and {_shape_str(b)} differ")
        return _BINARY[op](a, b)
    raise ContractError(f"unknown elementwise op {op!r}")


def matvec(m, v):
    """out[i] = sum_j m[i, j] * v[j]."""
    m = as_tensor(m)
    v = as_tensor(v)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise DimensionError(f"matvec: cannot multiply {_shape_str(m)} by {_shape_str(v)}")
    return m @ v


def batched_matvec(w, v):
    """Per-sample matvec of ``w`` [B, r, c] with ``v`` [B, c] -> [B, r]."""
    if w.ndim != 3 or v.ndim != 2 or w.shape[0] != v.shape[0] or w.shape[2] != v.shape[1]:
        raise DimensionError(
            f"batched_matvec: cannot multiply {_shape_str(w)} by {_shape_str(v)}")
    return kernels.bmv(w, v)


def chunk(t, parts):
    """Split a rank-1 tensor into ``parts`` equal consecutive pieces."""
    t = as_tensor(t)
    if t.ndim != 1:
        raise DimensionError(f"chunk expects rank 1, got {_shape_str(t)}")
    if parts < 1 or t.shape[0] % parts:
        raise ContractError(f"chunk: {parts} does not divide length {t.shape[0]}")
    size = t.shape[0] // parts
    return [t[i * size:(i + 1) * size].copy() for i in range(parts)]


def concat(parts):
    return np.concatenate([as_tensor(p) for p in parts])


def reshape_to_matrix(t, rows, cols):
    """Row-major fill of a flat vector into a ``rows`` x ``cols`` matrix."""
    t = as_tensor(t)
    if t.ndim != 1 or t.shape[0] != rows * cols:
        raise DimensionError(f"cannot reshape {_shape_str(t)} to [{rows}x{cols}]")
    return t.reshape(rows, cols).copy()


def flatten(m):
    return np.ascontiguousarray(m, dtype=DTYPE).reshape(-1).copy()


def avg_pool_1d(x, k):
    """Non-overlapping mean pooling along the last (time) axis.

    ``x`` is [..., T]; the result is [..., T // k]. ``k`` must divide T: the
    series is never padded.
    """
    x = as_tensor(x)
    T = x.shape[-1]
    if k < 1 or k > T:
        raise ConfigurationError(f"pooling kernel k={k} invalid for length T={T}")
    if T % k:
        raise ConfigurationError(f"pooling kernel k={k} does not divide T={T}")
    return x.reshape(*x.shape[:-1], T // k, k).mean(axis=-1)


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    x = np.asarray(x, dtype=DTYPE)
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
