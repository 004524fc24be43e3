"""S-estimator by elemental subsampling plus concentration steps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from robustmm.errors import (
    DegenerateResiduals,
    NotPositiveDefinite,
    SingularSubsample,
)
from robustmm.estimators.data import normalize_weights
from robustmm.estimators.scale import check_c0, m_scale, m_scale_batch
from robustmm.estimators.scores import metric_step, reweight_step
from robustmm.loss import consistency_b0
from robustmm.matrix import cholesky, is_positive_definite, mahalanobis_batch
from robustmm.structures import normalize_direction, project_theta

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

    from robustmm.estimators.data import Dataset
    from robustmm.loss import Loss
    from robustmm.structures import LinearCovStructure

__all__ = ["SConfig", "SFit", "fit_initial_s"]


@dataclass(frozen=True)
class SConfig:
    """Subsampling settings.

    ``subset_size`` defaults to ``max(q, k) + 1`` observations, the smallest
    size that leaves a nonsingular residual scatter for location-scatter data.
    """

    n_sub: int = 500
    n_csteps: int = 2
    n_best: int = 10
    max_refine: int = 500
    refine_tol: float = 1e-12
    refine_step_tol: float = 1e-10
    max_halving: int = 30
    seed: int = 0
    subset_size: int | None = None

    def __post_init__(self) -> None:
        if self.n_sub < 1 or self.n_best < 1 or self.n_csteps < 0:
            raise ValueError("n_sub and n_best must be positive, n_csteps nonnegative")


@dataclass(frozen=True)
class SFit:
    beta: NDArray[np.float64]
    gamma: NDArray[np.float64]
    sigma: float
    theta: NDArray[np.float64]
    n_iter: int
    converged: bool
    b0: float


def _candidate(data: Dataset, struct: LinearCovStructure, idx: NDArray[np.intp]):
    X = data.X[idx].reshape(-1, data.q)
    y = data.y[idx].reshape(-1)
    beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < data.q:
        return None
    e = data.y[idx] - np.einsum("nkq,q->nk", data.X[idx], beta)
    m = e.T @ e / len(idx)
    theta = project_theta(struct, m)
    if not is_positive_definite(struct.evaluate(theta)):
        # scatter of the full residual set as a fallback start
        e = data.residuals(beta)
        theta = project_theta(struct, e.T @ e / data.n)
        if not is_positive_definite(struct.evaluate(theta)):
            return None
    try:
        gamma, _ = normalize_direction(struct, theta)
        cholesky(struct.evaluate(gamma))
    except NotPositiveDefinite:
        return None
    return beta, gamma


def _exact_fit_mass(data: Dataset, beta: NDArray[np.float64], w: NDArray[np.float64]) -> float:
    e = np.linalg.norm(data.residuals(beta), axis=1)
    scale = max(1.0, float(np.max(np.abs(data.y))))
    return float(w[e <= 1e-10 * scale].sum())


def _descend(
    data: Dataset,
    struct: LinearCovStructure,
    loss0: Loss,
    b0: float,
    w: NDArray[np.float64],
    beta: NDArray[np.float64],
    gamma: NDArray[np.float64],
    sigma: float,
    steps: int,
    tol: float,
    max_halving: int,
    step_tol: float = np.inf,
) -> tuple[NDArray[np.float64], NDArray[np.float64], float, int, bool]:
    """Reweighting steps that never increase the M-scale."""
    for it in range(1, steps + 1):
        try:
            beta_new, gamma_raw = reweight_step(data, struct, beta, gamma, sigma, loss0, w)
        except (DegenerateResiduals, NotPositiveDefinite, np.linalg.LinAlgError):
            return beta, gamma, sigma, it, False
        t = 1.0
        accepted = False
        for _ in range(max_halving + 1):
            g = (1 - t) * gamma + t * gamma_raw
            if is_positive_definite(struct.evaluate(g)):
                b = (1 - t) * beta + t * beta_new
                try:
                    g, _ = normalize_direction(struct, g)
                    s = m_scale(mahalanobis_batch(data.residuals(b), struct.evaluate(g)), loss0, b0, w)
                except (DegenerateResiduals, NotPositiveDefinite):
                    s = np.inf
                if s <= sigma * (1 + 1e-14):
                    accepted = True
                    break
            t /= 2
        if not accepted:
            return beta, gamma, sigma, it, True
        change = abs(sigma - s) / sigma
        step = metric_step(data, struct, beta, gamma, b, g, sigma) if change < tol else np.inf
        beta, gamma, sigma = b, g, s
        # sigma is flat at the optimum, so also ask for a small parameter step
        if change < tol and step < step_tol:
            return beta, gamma, sigma, it, True
    return beta, gamma, sigma, steps, False


def fit_initial_s(
    data: Dataset,
    struct: LinearCovStructure,
    loss0: Loss,
    config: SConfig | None = None,
    *,
    b0: float | None = None,
    weights: ArrayLike | None = None,
    start: tuple[ArrayLike, ArrayLike] | None = None,
) -> SFit:
    """High-breakdown S-estimator minimizing the M-scale subject to ``|V(gamma)| = 1``.

    Parameters
    ----------
    data, struct, loss0
        Observations, covariance structure and the scale loss.
    config : SConfig, optional
    b0 : float, optional
        Consistency constant; defaults to the normal-model value.
    weights : array_like, optional
        Observation weights (uniform by default).
    start : (beta, theta), optional
        Skip subsampling and refine from this point.

    Returns
    -------
    SFit
        ``theta = sigma^2 gamma`` estimates the covariance parameter.

    Raises
    ------
    DegenerateResiduals
        If a candidate fits too many observations exactly.
    SingularSubsample
        If every candidate fit is singular.
    """
    config = config or SConfig()
    if struct.k != data.k:
        raise ValueError(f"structure has k={struct.k}, data have k={data.k}")
    if b0 is None:
        b0 = consistency_b0(loss0, data.k)
    w = normalize_weights(weights, data.n)
    ratio = 1.0 - b0 / loss0.sup_rho

    starts: list[tuple[NDArray[np.float64], NDArray[np.float64], float]] = []
    if start is not None:
        beta = np.asarray(start[0], dtype=float)
        gamma, _ = normalize_direction(struct, np.asarray(start[1], dtype=float))
        d = mahalanobis_batch(data.residuals(beta), struct.evaluate(gamma))
        check_c0(d, w, loss0, b0)
        starts.append((beta, gamma, m_scale(d, loss0, b0, w)))
    else:
        rng = np.random.default_rng(config.seed)
        h = min(data.n, config.subset_size or max(data.q, data.k) + 1)
        cands = []
        for _ in range(config.n_sub):
            idx = rng.choice(data.n, size=h, replace=False)
            c = _candidate(data, struct, idx)
            if c is None:
                continue
            if _exact_fit_mass(data, c[0], w) >= ratio - 1e-14:
                raise DegenerateResiduals(
                    f"an elemental fit reproduces at least {ratio:.3g} of the data exactly"
                )
            cands.append(c)
        if not cands:
            raise SingularSubsample(f"all {config.n_sub} elemental subsets were singular")
        screened = []
        for beta, gamma in cands:
            try:
                d = mahalanobis_batch(data.residuals(beta), struct.evaluate(gamma))
            except NotPositiveDefinite:
                continue
            if weights is None:
                sigma = float(m_scale_batch(d[None, :], loss0, b0)[0])
            else:
                try:
                    sigma = m_scale(d, loss0, b0, w)
                except DegenerateResiduals:
                    sigma = np.nan
            if not np.isfinite(sigma):
                continue
            beta, gamma, sigma, _, _ = _descend(
                data, struct, loss0, b0, w, beta, gamma, sigma,
                config.n_csteps, 0.0, config.max_halving,
            )
            screened.append((sigma, len(screened), beta, gamma))
        if not screened:
            raise SingularSubsample("no candidate produced a valid scale")
        screened.sort(key=lambda r: (r[0], r[1]))
        for sigma, _, beta, gamma in screened[: config.n_best]:
            d = mahalanobis_batch(data.residuals(beta), struct.evaluate(gamma))
            starts.append((beta, gamma, m_scale(d, loss0, b0, w)))

    best = None
    for beta, gamma, sigma in starts:
        out = _descend(
            data, struct, loss0, b0, w, beta, gamma, sigma,
            config.max_refine, config.refine_tol, config.max_halving,
            config.refine_step_tol,
        )
        if best is None or out[2] < best[2]:
            best = out
    beta, gamma, sigma, n_iter, converged = best
    if not is_positive_definite(struct.evaluate(gamma)):
        raise NotPositiveDefinite("S-estimate left the positive definite cone")
    return SFit(beta, gamma, sigma, sigma * sigma * gamma, n_iter, converged, b0)
