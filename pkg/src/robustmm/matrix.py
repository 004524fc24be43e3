"""Matrix bookkeeping: vec/vech, duplication and commutation matrices, distances.

All routines use column-major ``vec`` (stack columns) and the column-major
lower-triangle ``vech`` ordering ``(a11, ..., ak1, a22, ..., akk)``.
"""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
from scipy import linalg as sla

from robustmm.errors import NotPositiveDefinite

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

__all__ = [
    "cholesky",
    "commutation_matrix",
    "duplication_matrix",
    "is_positive_definite",
    "logdet",
    "mahalanobis",
    "mahalanobis_batch",
    "shape_of",
    "sym_inv_sqrt",
    "unvec",
    "unvech",
    "vec",
    "vech",
]


def _vech_indices(k: int) -> tuple[NDArray[np.intp], NDArray[np.intp]]:
    # column-major lower triangle: for each column j, rows j..k-1
    rows = np.concatenate([np.arange(j, k) for j in range(k)])
    cols = np.concatenate([np.full(k - j, j) for j in range(k)])
    return rows, cols


def vec(a: ArrayLike) -> NDArray[np.float64]:
    """Stack the columns of ``a`` into a single vector."""
    a = np.asarray(a, dtype=float)
    return a.reshape(-1, order="F")


def unvec(v: ArrayLike, k: int | None = None) -> NDArray[np.float64]:
    v = np.asarray(v, dtype=float)
    if k is None:
        k = int(round(np.sqrt(v.size)))
    if k * k != v.size:
        raise ValueError(f"vector of length {v.size} is not a vec of a square matrix")
    return v.reshape(k, k, order="F")


def vech(m: ArrayLike) -> NDArray[np.float64]:
    """Half-vectorization of a symmetric matrix.

    Parameters
    ----------
    m : array_like, shape (k, k)
        Symmetric matrix.

    Returns
    -------
    ndarray, shape (k(k+1)/2,)
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"vech needs a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-12 * scale):
        raise ValueError("vech needs a symmetric matrix")
    rows, cols = _vech_indices(m.shape[0])
    return m[rows, cols].copy()


def unvech(h: ArrayLike) -> NDArray[np.float64]:
    h = np.asarray(h, dtype=float).ravel()
    # solve k(k+1)/2 = len(h)
    k = int(round((np.sqrt(8 * h.size + 1) - 1) / 2))
    if k < 1 or k * (k + 1) // 2 != h.size:
        raise ValueError(f"length {h.size} is not k(k+1)/2 for any integer k")
    rows, cols = _vech_indices(k)
    out = np.zeros((k, k))
    out[rows, cols] = h
    out[cols, rows] = h
    return out


def duplication_matrix(k: int) -> NDArray[np.float64]:
    """Return the ``k^2 x k(k+1)/2`` matrix with ``D vech(C) = vec(C)``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rows, cols = _vech_indices(k)
    d = np.zeros((k * k, rows.size))
    for j, (r, c) in enumerate(zip(rows, cols)):
        d[r + c * k, j] = 1.0
        d[c + r * k, j] = 1.0
    return d


def commutation_matrix(k: int) -> NDArray[np.float64]:
    """Return ``K_{k,k}``, the permutation with ``K vec(A) = vec(A^T)``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    idx = np.arange(k * k).reshape(k, k, order="F")
    perm = idx.T.reshape(-1, order="F")
    return np.eye(k * k)[perm]


def cholesky(c: ArrayLike) -> NDArray[np.float64]:
    """Lower Cholesky factor; raises :class:`NotPositiveDefinite` on a non-positive pivot."""
    c = np.asarray(c, dtype=float)
    if not np.all(np.isfinite(c)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    try:
        return np.linalg.cholesky(c)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def is_positive_definite(c: ArrayLike) -> bool:
    try:
        cholesky(c)
    except NotPositiveDefinite:
        return False
    return True


def logdet(c: ArrayLike) -> float:
    """Log-determinant of a positive definite matrix via its Cholesky factor."""
    chol = cholesky(c)
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def mahalanobis(y: ArrayLike, t: ArrayLike, c: ArrayLike) -> float:
    """Distance ``sqrt((y - t)' C^{-1} (y - t))``."""
    diff = np.asarray(y, dtype=float) - np.asarray(t, dtype=float)
    chol = cholesky(c)
    z = sla.solve_triangular(chol, diff, lower=True)
    return float(np.sqrt(z @ z))


def mahalanobis_batch(resid: ArrayLike, c: ArrayLike) -> NDArray[np.float64]:
    """Distances for each row of ``resid`` (shape ``(n, k)``) under scatter ``c``."""
    resid = np.asarray(resid, dtype=float)
    chol = cholesky(c)
    z = sla.solve_triangular(chol, resid.T, lower=True)
    return np.sqrt(np.einsum("ij,ij->j", z, z))


def shape_of(v: ArrayLike) -> NDArray[np.float64]:
    """Determinant-normalized shape ``V / |V|^{1/k}``."""
    v = np.asarray(v, dtype=float)
    k = v.shape[0]
    return v / np.exp(logdet(v) / k)


def sym_inv_sqrt(c: ArrayLike) -> NDArray[np.float64]:
    """Symmetric inverse square root ``C^{-1/2}`` of a positive definite matrix."""
    c = np.asarray(c, dtype=float)
    cholesky(c)
    w, q = np.linalg.eigh(c)
    return (q / np.sqrt(w)) @ q.T
