"""Objective, score equations and the reweighting step shared by the S and MM fits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.linalg import solve_triangular

from robustmm.errors import DegenerateResiduals
from robustmm.estimators.data import normalize_weights
from robustmm.matrix import cholesky, logdet, mahalanobis_batch
from robustmm.structures import weighted_project_theta

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

    from robustmm.estimators.data import Dataset
    from robustmm.loss import Loss
    from robustmm.structures import LinearCovStructure

__all__ = [
    "Scores",
    "evaluate_scores",
    "gls_beta",
    "h_matrices",
    "metric_step",
    "objective_Rn",
    "reweight_step",
    "score_contributions",
]


def objective_Rn(
    data: Dataset,
    beta: ArrayLike,
    C: ArrayLike,
    sigma: float,
    loss1: Loss,
    weights: ArrayLike | None = None,
) -> float:
    """``R_n(beta, C) = sum_i w_i rho1(d(y_i, X_i beta, C) / sigma)``."""
    d = mahalanobis_batch(data.residuals(beta), C)
    w = normalize_weights(weights, data.n)
    return float(w @ loss1.rho(d / sigma))


def metric_step(
    data: Dataset,
    struct: LinearCovStructure,
    beta: NDArray[np.float64],
    gamma: NDArray[np.float64],
    beta_new: NDArray[np.float64],
    gamma_new: NDArray[np.float64],
    sigma: float,
) -> float:
    """Step size in the metric of the current ``V``, scale free in ``y``."""
    V = struct.evaluate(gamma)
    lc = cholesky(V)
    dv = solve_triangular(lc, solve_triangular(lc, struct.evaluate(gamma_new) - V, lower=True).T, lower=True)
    db = mahalanobis_batch(np.einsum("nkq,q->nk", data.X, beta_new - beta), V) / sigma
    return float(max(np.max(np.abs(dv)), np.max(db)))


def gls_beta(
    data: Dataset, vinv: NDArray[np.float64], u: NDArray[np.float64]
) -> NDArray[np.float64]:
    """Weighted GLS ``(sum u_i X_i' V^-1 X_i)^-1 sum u_i X_i' V^-1 y_i``."""
    q = data.q
    wx = (data.X * u[:, None, None]).reshape(-1, q)
    a = wx.T @ (vinv @ data.X).reshape(-1, q)
    b = wx.T @ (data.y @ vinv).reshape(-1)
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateResiduals("weighted design matrix is singular") from exc


def reweight_step(
    data: Dataset,
    struct: LinearCovStructure,
    beta: NDArray[np.float64],
    gamma: NDArray[np.float64],
    sigma: float,
    loss: Loss,
    w: NDArray[np.float64],
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """One fixed-point update of the weighted estimating equations.

    Weights ``u(d_i/sigma)`` come from the current fit.  ``beta`` is updated
    by weighted GLS, then the scatter target
    ``M = k sum u_i e_i e_i' / sum u_i e_i' V^-1 e_i`` (new residuals) is
    projected onto the structure in the ``V^-1 kron V^-1`` metric.  Returns the
    new ``beta`` and the unnormalized ``gamma``; the caller rescales.
    """
    V = struct.evaluate(gamma)
    vinv = np.linalg.inv(V)
    e = data.residuals(beta)
    d = mahalanobis_batch(e, V)
    u = w * loss.u(d / sigma)
    if not u.sum() > 0:
        raise DegenerateResiduals("every observation received zero weight")
    beta_new = gls_beta(data, vinv, u)
    e_new = data.residuals(beta_new)
    quad = np.einsum("nk,kl,nl->n", e_new, vinv, e_new)
    denom = float(u @ quad)
    if not denom > 0:
        raise DegenerateResiduals("weighted residuals vanish")
    m = data.k * np.einsum("n,nk,nl->kl", u, e_new, e_new) / denom
    return beta_new, weighted_project_theta(struct, m, vinv)


def h_matrices(struct: LinearCovStructure, gamma: ArrayLike) -> list[NDArray[np.float64]]:
    """``H_j = tr(V^-1 L_j) V(gamma) - tr(V^-1 V(gamma)) L_j``."""
    gamma = np.asarray(gamma, dtype=float)
    V = struct.evaluate(gamma)
    vinv = np.linalg.inv(V)
    a = sum(g * b for g, b in zip(gamma, struct.basis))
    tr_a = float(np.sum(vinv * a))
    return [float(np.sum(vinv * b)) * a - tr_a * b for b in struct.basis]


@dataclass(frozen=True)
class Scores:
    """Per-observation or averaged score values.

    ``psi_gamma`` is the projected form ``-L'(V^-1 kron V^-1) vec(Psi_V)``;
    ``psi_gamma_general`` uses the ``H_j`` matrices.  The two coincide when
    ``|V(gamma)| = 1``.
    """

    psi_beta: NDArray[np.float64]
    psi_gamma: NDArray[np.float64]
    psi_gamma_general: NDArray[np.float64]
    psi_V: NDArray[np.float64]


def score_contributions(
    data: Dataset,
    struct: LinearCovStructure,
    beta: ArrayLike,
    gamma: ArrayLike,
    sigma: float,
    loss1: Loss,
) -> Scores:
    """Score terms for each observation, leading axis of length ``n``."""
    gamma = np.asarray(gamma, dtype=float)
    k = data.k
    V = struct.evaluate(gamma)
    cholesky(V)
    vinv = np.linalg.inv(V)
    ld = logdet(V)
    e = data.residuals(beta)
    d = mahalanobis_batch(e, V)
    s = d / sigma
    u1 = loss1.u(s)
    v1 = loss1.v(s)
    ve = e @ vinv
    psi_beta = u1[:, None] * np.einsum("nkq,nk->nq", data.X, ve)
    psi_v = (
        k * u1[:, None, None] * np.einsum("nk,nl->nkl", e, e)
        - (v1 * sigma * sigma)[:, None, None] * V
        - ld * V
    )
    # tr(V^-1 L_j V^-1 Psi_V)
    left = np.stack([vinv @ b @ vinv for b in struct.basis])
    psi_gamma = -np.einsum("jkl,nkl->nj", left, psi_v)
    hs = np.stack(h_matrices(struct, gamma))
    tr_vl = np.einsum("kl,jlk->j", vinv, np.stack(struct.basis))
    quad_h = np.einsum("nk,jkl,nl->nj", ve, hs, ve)
    psi_gamma_general = u1[:, None] * quad_h - ld * tr_vl[None, :]
    return Scores(psi_beta, psi_gamma, psi_gamma_general, psi_v)


def evaluate_scores(
    data: Dataset,
    struct: LinearCovStructure,
    beta: ArrayLike,
    gamma: ArrayLike,
    sigma: float,
    loss1: Loss,
    weights: ArrayLike | None = None,
) -> Scores:
    """Weighted averages of :func:`score_contributions`."""
    w = normalize_weights(weights, data.n)
    per = score_contributions(data, struct, beta, gamma, sigma, loss1)
    return Scores(
        w @ per.psi_beta,
        w @ per.psi_gamma,
        w @ per.psi_gamma_general,
        np.tensordot(w, per.psi_V, axes=1),
    )
