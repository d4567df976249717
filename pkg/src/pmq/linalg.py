"""Deterministic dense linear algebra primitives.

All compute happens in float64 regardless of what files store. Reductions
use a fixed summation order (no BLAS reassociation), so repeated runs give
bit-identical results on a given platform.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class SingularMatrixError(ArithmeticError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def require_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed left-to-right accumulation order.

    Each output element is accumulated one product at a time over the inner
    dimension in increasing index order, exactly like a scalar triple loop
    (one rounded multiply and one rounded add per step).
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    tmp = np.empty((m, n))
    for j in range(k):
        np.multiply(a[:, j, np.newaxis], b[j, np.newaxis, :], out=tmp)
        out += tmp
    return out


def frobenius_sq(a) -> float:
    """Sum of squared entries, accumulated in row-major element order."""
    a = as_matrix(a, "a")
    if a.size == 0:
        return 0.0
    sq = np.multiply(a, a).ravel()
    return float(np.add.accumulate(sq)[-1])


def check_symmetric(h: np.ndarray, name: str = "h", rtol: float = 1e-9) -> np.ndarray:
    """Require an entrywise-symmetric square matrix (|H - H^T| <= rtol * |H|)."""
    h = as_matrix(h, name)
    if h.shape[0] != h.shape[1]:
        raise ShapeError(f"{name} must be square, got {h.shape}")
    if h.size:
        scale = float(np.abs(h).max())
        asym = float(np.abs(h - h.T).max())
        if asym > rtol * max(scale, 1e-300):
            raise ValueError(f"{name} is not symmetric: max|H-H^T|={asym:g} vs max|H|={scale:g}")
    return h


def cholesky_upper(h: np.ndarray, context: str = "matrix") -> np.ndarray:
    """Upper Cholesky factor U with h = U^T U. Raises on non-PD input."""
    c, info = lapack.dpotrf(h, lower=0, overwrite_a=0)
    if info > 0:
        raise SingularMatrixError(
            f"{context} is not positive definite: non-positive pivot at index {int(info)}",
            pivot=int(info),
        )
    if info < 0:
        raise ValueError(f"illegal argument {-int(info)} passed to dpotrf")
    return np.triu(c)


def cholesky_solve(h, rhs) -> np.ndarray:
    """Solve S @ h = rhs for S, with h symmetric positive definite.

    Right division: the unknown multiplies h from the left, matching the
    convention of row-stacked weights times a square curvature matrix.
    """
    h = check_symmetric(h, "h")
    rhs = as_matrix(rhs, "rhs")
    if rhs.shape[1] != h.shape[0]:
        raise ShapeError(f"rhs has {rhs.shape[1]} columns, h is {h.shape[0]}x{h.shape[0]}")
    u = cholesky_upper(h, context="h")
    x, info = lapack.dpotrs(u, rhs.T, lower=0)
    if info != 0:
        raise ValueError(f"dpotrs failed with info={int(info)}")
    return np.ascontiguousarray(x.T)


def cholesky_inverse_upper(h: np.ndarray, context: str = "matrix") -> np.ndarray:
    """Upper Cholesky factor U of inv(h), i.e. inv(h) = U^T U.

    The classic sequential-rounding solver consumes rows of this factor: its
    diagonal carries the effective step sizes and its upper rows carry the
    compensation weights for not-yet-quantized columns.
    """
    u = cholesky_upper(h, context=context)
    inv, info = lapack.dpotri(u, lower=0)
    if info != 0:
        raise SingularMatrixError(
            f"{context} inverse failed in dpotri at index {int(info)}", pivot=int(info)
        )
    inv = np.triu(inv) + np.triu(inv, 1).T
    return cholesky_upper(inv, context=f"inverse of {context}")
