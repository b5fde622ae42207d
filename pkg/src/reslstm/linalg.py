"""Dense numeric kernel: vectors, matrices, affine maps, nonlinearities.

Vectors are 1-D float64 ndarrays, matrices are 2-D float64 row-major
ndarrays.  Every operation is a pure function on immutable inputs and is
deterministic: identical inputs give bit-identical outputs.
"""

import numpy as np

from .errors import DimensionError

__all__ = [
    "affine",
    "sigmoid",
    "tanh_v",
    "hadamard",
    "concat",
    "slice_prefix",
]


def affine(w: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Compute ``w @ x + b`` for an m-by-n matrix, n-vector and m-vector."""
    if w.ndim != 2 or x.ndim != 1 or b.ndim != 1:
        raise DimensionError(
            f"affine expects matrix, vector, vector; got ndim "
            f"{w.ndim}, {x.ndim}, {b.ndim}"
        )
    m, n = w.shape
    if x.shape[0] != n or b.shape[0] != m:
        raise DimensionError(
            f"affine shape mismatch: w is {m}x{n}, x has len {x.shape[0]}, "
            f"b has len {b.shape[0]}"
        )
    return w @ x + b


def sigmoid(v: np.ndarray) -> np.ndarray:
    """Elementwise logistic function, computed in a sign-split form.

    For u >= 0 uses 1/(1+exp(-u)), otherwise exp(u)/(1+exp(u)), so the
    exponential argument is never positive and cannot overflow.
    """
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def tanh_v(v: np.ndarray) -> np.ndarray:
    """Elementwise hyperbolic tangent."""
    return np.tanh(np.asarray(v, dtype=np.float64))


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product of two equal-length vectors."""
    if a.shape != b.shape:
        raise DimensionError(
            f"hadamard length mismatch: {a.shape} vs {b.shape}"
        )
    return a * b


def concat(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Concatenate two vectors, a then b."""
    return np.concatenate([a, b])


def slice_prefix(v: np.ndarray, k: int) -> np.ndarray:
    """Return the first k elements of a vector, 1 <= k <= len(v)."""
    if not 1 <= k <= v.shape[0]:
        raise DimensionError(
            f"slice_prefix: k={k} out of range for vector of len {v.shape[0]}"
        )
    return v[:k].copy()
