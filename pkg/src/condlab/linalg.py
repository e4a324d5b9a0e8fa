"""Small dense linear algebra on float64 numpy arrays.

Vectors are 1-d arrays and matrices are 2-d arrays. The helpers here add
shape checking on top of numpy; the symmetric eigensolver is a cyclic
Jacobi method so the package does not depend on LAPACK eigen-routines.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import PreconditionError, ShapeError

__all__ = [
    "as_vector",
    "as_matrix",
    "dot",
    "matvec",
    "matmul",
    "transpose",
    "outer",
    "norm2",
    "frobenius",
    "symmetric_eigen",
    "singular_values",
]


def as_vector(v) -> np.ndarray:
    arr = np.array(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise ShapeError(f"expected a non-empty 1-d vector, got shape {arr.shape}")
    return arr


def as_matrix(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != 2 or arr.size < 1:
        raise ShapeError(f"expected a non-empty 2-d matrix, got shape {arr.shape}")
    return arr


def dot(u, v) -> float:
    u, v = as_vector(u), as_vector(v)
    if u.shape != v.shape:
        raise ShapeError(f"length mismatch: {u.size} vs {v.size}")
    return float(u @ v)


def matvec(a, v) -> np.ndarray:
    a, v = as_matrix(a), as_vector(v)
    if a.shape[1] != v.size:
        raise ShapeError(f"cannot multiply {a.shape} matrix by length-{v.size} vector")
    return a @ v


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(a) -> np.ndarray:
    return as_matrix(a).T.copy()


def outer(u, v) -> np.ndarray:
    return np.outer(as_vector(u), as_vector(v))


def norm2(v) -> float:
    return float(math.sqrt(float(np.sum(as_vector(v) ** 2))))


def frobenius(a) -> float:
    return float(math.sqrt(float(np.sum(as_matrix(a) ** 2))))


def _off_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(math.sqrt(float(np.sum(off * off))))


def symmetric_eigen(a, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, O)`` with eigenvalues sorted in descending order
    and ``a == O @ diag(eigenvalues) @ O.T``. ``tol`` bounds the allowed
    asymmetry, measured relative to ``max(1, ||a||_F)``.
    """
    a = as_matrix(a)
    n, k = a.shape
    if n != k:
        raise ShapeError(f"symmetric_eigen needs a square matrix, got {a.shape}")
    scale = max(1.0, frobenius(a))
    if np.max(np.abs(a - a.T)) > tol * scale:
        raise PreconditionError("matrix is not symmetric within tolerance")

    work = 0.5 * (a + a.T)
    rot = np.eye(n)
    target = np.finfo(np.float64).eps * max(frobenius(work), np.finfo(np.float64).tiny)
    for _ in range(max_sweeps):
        if _off_norm(work) <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = work[p, q]
                if apq == 0.0:
                    continue
                diff = work[q, q] - work[p, p]
                if abs(diff) > 1e150 * abs(apq):
                    t = apq / diff  # tan of the rotation angle when theta is huge, ~ 1 / (2 theta)
                else:
                    theta = diff / (2.0 * apq)
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                cos = 1.0 / math.sqrt(t * t + 1.0)
                sin = t * cos
                # rotate columns then rows of work, accumulate into rot
                col_p = work[:, p].copy()
                col_q = work[:, q]
                work[:, p] = cos * col_p - sin * col_q
                work[:, q] = sin * col_p + cos * col_q
                row_p = work[p, :].copy()
                row_q = work[q, :]
                work[p, :] = cos * row_p - sin * row_q
                work[q, :] = sin * row_p + cos * row_q
                work[p, q] = work[q, p] = 0.0
                rp = rot[:, p].copy()
                rot[:, p] = cos * rp - sin * rot[:, q]
                rot[:, q] = sin * rp + cos * rot[:, q]

    eigenvalues = np.diag(work).copy()
    order = np.argsort(-eigenvalues, kind="stable")
    return eigenvalues[order], rot[:, order]


def singular_values(a, tol: float = 1e-12) -> np.ndarray:
    """Descending singular values as square roots of the eigenvalues of A^T A."""
    a = as_matrix(a)
    gram = a.T @ a
    gram = 0.5 * (gram + gram.T)
    eigenvalues, _ = symmetric_eigen(gram, tol=max(tol, 1e-12))
    return np.sqrt(np.clip(eigenvalues, 0.0, None))
