"""Dense float64 helpers: checked products, norms, finite differences, RNG.

Matrices and vectors are plain ``numpy`` arrays of dtype float64 in C
(row-major) order. Every checkpoint and dataset blob is written in that
layout, little-endian.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimensionError, NumericError

DEFAULT_FD_STEP = 1e-5


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty 2D array, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm_sq(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sum(m * m))


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x, h: float = DEFAULT_FD_STEP
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Works for arrays of any shape; the result has the shape of ``x``.
    """
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value while differentiating coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator: numpy's PCG64 bit generator seeded with ``seed``."""
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return np.random.Generator(np.random.PCG64(seed))


def write_f64(path, arr) -> None:
    """Write an array as raw little-endian float64, row-major."""
    np.ascontiguousarray(arr, dtype="<f8").tofile(path)


def read_f64(path, shape) -> np.ndarray:
    data = np.fromfile(path, dtype="<f8")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise DimensionError(f"{path}: expected {expected} values for shape {tuple(shape)}, found {data.size}")
    return data.reshape(shape).astype(np.float64)
