"""Dense array helpers shared by the rest of the package.

Arrays are plain row-major ``numpy.ndarray`` objects. This module adds the
pieces numpy leaves to the caller: a package-wide default precision
(f32 for training, f64 for gradient checking), shape-checked elementwise
ops without implicit broadcasting, and a hard error on non-finite results.
"""

from contextlib import contextmanager

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_DTYPE = np.float32


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype):
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}; use float32 or float64")
    _DTYPE = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default precision, e.g. for finite differences."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def tensor(values, dtype=None):
    """Fresh contiguous array in the default (or given) precision."""
    out = np.array(values, dtype=dtype or _DTYPE, order="C", copy=True)
    check_finite(out)
    return out


def check_finite(a, what="result"):
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return a


_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op, a, b):
    """``op`` in {add, sub, mul, scale}; ``b`` is an array of equal shape or a scalar."""
    a = np.asarray(a)
    if op == "scale":
        if not np.isscalar(b):
            raise ValueError("scale takes a scalar factor")
        out = a * a.dtype.type(b)
    elif op in _ELEMENTWISE:
        if not np.isscalar(b):
            b = np.asarray(b)
            if b.shape != a.shape:
                raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
        out = _ELEMENTWISE[op](a, b)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return check_finite(np.ascontiguousarray(out))


_REDUCE = {"sum": np.sum, "mean": np.mean, "max": np.max, "min": np.min}


def reduce(op, t, axes=None):
    t = np.asarray(t)
    if t.size == 0:
        raise ValueError("cannot reduce an empty tensor")
    if op not in _REDUCE:
        raise ValueError(f"unknown reduction {op!r}")
    if axes is not None:
        axes = tuple(np.atleast_1d(axes).tolist())
        for ax in axes:
            if not -t.ndim <= ax < t.ndim:
                raise ValueError(f"axis {ax} out of range for ndim {t.ndim}")
    return check_finite(np.asarray(_REDUCE[op](t, axis=axes)))


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b)


def reshape(t, shape):
    t = np.asarray(t)
    if int(np.prod(shape)) != t.size:
        raise ValueError(f"cannot reshape {t.shape} to {tuple(shape)}")
    return np.ascontiguousarray(t).reshape(shape).copy()
