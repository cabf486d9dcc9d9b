"""Small dense linear-algebra helpers.

Every routine here is complex-analytic so that complex-step differentiation
can be pushed through the whole free-energy evaluation: no conjugation,
no pivoting branches, no absolute values.
"""
from __future__ import annotations

import numpy as np


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """A matrix required to be positive definite failed its factorization."""


def as_array(x, ndim: int | None = None) -> np.ndarray:
    """Return a float (or complex, if already complex) ndarray copy."""
    a = np.array(x, dtype=complex if np.iscomplexobj(x) else float)
    if ndim is not None:
        while a.ndim < ndim:
            a = a.reshape(a.shape + (1,)) if a.ndim else a.reshape(1)
    return a


def sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def chol(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with ``a = L @ L.T`` (plain transpose).

    Raises NotPositiveDefiniteError when a pivot has non-positive real part.
    """
    a = np.asarray(a)
    if not np.iscomplexobj(a):
        try:
            return np.linalg.cholesky(a)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(str(exc)) from None
    n = a.shape[0]
    L = np.zeros_like(a)
    for j in range(n):
        piv = a[j, j] - L[j, :j] @ L[j, :j]
        if not np.real(piv) > 0:
            raise NotPositiveDefiniteError(f"pivot {j} is not positive")
        L[j, j] = np.sqrt(piv)
        L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def logdet_pd(a: np.ndarray) -> complex | float:
    """log|a| for a symmetric positive-definite matrix."""
    L = chol(a)
    return 2.0 * np.sum(np.log(np.diag(L)))


def logdet_identity_plus(e: np.ndarray) -> complex | float:
    """log|I + e| for symmetric ``e`` with ``I + e`` positive definite.

    The Cholesky pivots are tracked as offsets from one and fed to log1p,
    which keeps full relative precision when ``e`` is tiny.
    """
    e = np.asarray(e)
    n = e.shape[0]
    L = np.zeros_like(e)
    total = 0.0
    for j in range(n):
        off = e[j, j] - L[j, :j] @ L[j, :j]
        if not np.real(1.0 + off) > 0:
            raise NotPositiveDefiniteError(f"pivot {j} is not positive")
        L[j, j] = np.sqrt(1.0 + off)
        L[j + 1:, j] = (e[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
        total = total + np.log1p(off)
    return total


def inv_pd(a: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix, symmetrized."""
    L = chol(a)
    Linv = np.linalg.solve(L, np.eye(a.shape[0]))
    return Linv.T @ Linv


def block_mask(n: int, k: int) -> np.ndarray:
    """N x (K*N) loading mask: row i is one on columns i*K .. i*K+K-1."""
    mask = np.zeros((n, n * k))
    for i in range(n):
        mask[i, i * k:(i + 1) * k] = 1.0
    return mask
