"""Dense float32 tensors.

A tensor is a C-contiguous ``numpy.ndarray`` of dtype float32. The helpers
here validate shapes and finiteness; reductions accumulate in float64.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    if shape is not None:
        arr = arr.reshape(tuple(shape))
    return arr


def zeros(shape: Sequence[int]) -> np.ndarray:
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ShapeError("shape must have at least one dimension")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dims must be >= 1, got {shape}")
    return np.zeros(shape, dtype=DTYPE)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``a * x + y`` as a new float32 tensor."""
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    if not np.isfinite(a):
        raise NonFiniteError("scalar a is not finite")
    with np.errstate(over="ignore"):
        out = DTYPE(a) * x.astype(DTYPE, copy=False) + y.astype(DTYPE, copy=False)
    return check_finite(out, "axpy result")


def stats(x: np.ndarray) -> tuple[float, float]:
    """Mean and Euclidean norm of the mean-centered tensor (float64)."""
    if x.size == 0:
        raise ShapeError("stats of an empty tensor")
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    mean = float(v.sum() / v.size)
    d = v - mean
    return mean, float(np.sqrt(np.dot(d, d)))
