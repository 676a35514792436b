"""
Dense linear algebra kernels used by the calibration passes.

All reductions run in float64 with a fixed summation order: matmul accumulates
one rank-1 term per inner index, k = 0, 1, ..., K-1. Every output row depends
only on the matching input row, so splitting the rows of A into tiles and
stacking the results reproduces the full product bit for bit.
"""
import numpy as np

from .errors import ShapeError


def _as_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a vector or a matrix, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    """
    Multiply A (M x K) by B (K x N) with sequential accumulation over K.

    A 1-D ``a`` is treated as a 1 x K row and the result keeps the 2-D shape.
    """
    a = _as_matrix(a, "A")
    b = _as_matrix(b, "B")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")

    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def vecmat(v, b) -> np.ndarray:
    """Row vector times matrix, returned as a 1-D array."""
    return matmul(np.asarray(v, dtype=np.float64).reshape(1, -1), b)[0]


def column_outer(a, b) -> np.ndarray:
    """Outer product of an M-vector and an N-vector."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"column_outer expects vectors, got {a.shape} and {b.shape}")
    return np.multiply.outer(a, b)


def squared_l2(x) -> float:
    """Sum of squares, accumulated in float64 in row-major order."""
    flat = np.asarray(x, dtype=np.float64).ravel()
    total = 0.0
    # np.add.reduce is pairwise; a cumulative sum keeps the order sequential
    if flat.size:
        total = float(np.cumsum(flat * flat)[-1])
    return total
