"""MM-estimator with auxiliary M-scale for structured covariances."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from robustmm.errors import DegenerateResiduals, NoDescent, NotPositiveDefinite
from robustmm.estimators.data import normalize_weights
from robustmm.estimators.scale import m_scale
from robustmm.estimators.scores import evaluate_scores, metric_step, objective_Rn, reweight_step
from robustmm.estimators.sest import SConfig, SFit, fit_initial_s
from robustmm.loss import check_nesting, consistency_b0
from robustmm.matrix import is_positive_definite, mahalanobis_batch
from robustmm.structures import normalize_direction

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

    from robustmm.estimators.data import Dataset
    from robustmm.loss import Loss
    from robustmm.structures import LinearCovStructure

__all__ = ["FitResult", "MMConfig", "mm_fit"]


@dataclass(frozen=True)
class MMConfig:
    """Iteration controls for the MM step.

    ``tol`` bounds the sup-norm of the averaged scores; ``step_tol`` bounds
    the sup-norm parameter change between iterations.
    """

    tol: float = 1e-8
    step_tol: float = 1e-10
    max_iter: int = 500
    max_halving: int = 30
    s_config: SConfig = field(default_factory=SConfig)


@dataclass(frozen=True)
class FitResult:
    beta: NDArray[np.float64]
    gamma: NDArray[np.float64]
    sigma: float
    theta: NDArray[np.float64]
    objective: float
    objective_initial: float
    score_norm: float
    converged: bool
    n_iter: int
    seed: int
    initial: SFit
    rn_check: bool
    restarted: bool = False

    @property
    def covariance(self) -> NDArray[np.float64]:
        return self.sigma**2 * self._V

    @property
    def _V(self) -> NDArray[np.float64]:
        return np.einsum("j,j...->...", self.gamma, self._basis)

    _basis: NDArray[np.float64] = field(default=None, repr=False)

    def to_dict(self) -> dict[str, Any]:
        out = {
            "beta": self.beta.tolist(),
            "gamma": self.gamma.tolist(),
            "sigma": self.sigma,
            "theta": self.theta.tolist(),
            "objective": self.objective,
            "objective_initial": self.objective_initial,
            "score_norm": self.score_norm,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "seed": self.seed,
            "rn_check": self.rn_check,
            "restarted": self.restarted,
            "initial": {
                k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in asdict(self.initial).items()
            },
        }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _score_norm(data, struct, beta, gamma, sigma, loss1, w) -> float:
    sc = evaluate_scores(data, struct, beta, gamma, sigma, loss1, w)
    return float(max(np.max(np.abs(sc.psi_beta)), np.max(np.abs(sc.psi_gamma))))


def _iterate(
    data: Dataset,
    struct: LinearCovStructure,
    loss1: Loss,
    w: NDArray[np.float64],
    sigma: float,
    beta: NDArray[np.float64],
    gamma: NDArray[np.float64],
    config: MMConfig,
) -> tuple[NDArray[np.float64], NDArray[np.float64], float, int, bool]:
    rn = objective_Rn(data, beta, struct.evaluate(gamma), sigma, loss1, w)
    norm = _score_norm(data, struct, beta, gamma, sigma, loss1, w)
    for it in range(1, config.max_iter + 1):
        if norm < config.tol:
            return beta, gamma, norm, it - 1, True
        beta_new, gamma_raw = reweight_step(data, struct, beta, gamma, sigma, loss1, w)
        t = 1.0
        accepted = False
        smallest = np.inf
        for _ in range(config.max_halving + 1):
            g = (1 - t) * gamma + t * gamma_raw
            # a convex mix with the current positive definite V is the fallback
            if is_positive_definite(struct.evaluate(g)):
                b = (1 - t) * beta + t * beta_new
                try:
                    g, _ = normalize_direction(struct, g)
                    rn_new = objective_Rn(data, b, struct.evaluate(g), sigma, loss1, w)
                except NotPositiveDefinite:
                    rn_new = np.inf
                smallest = min(smallest, abs(rn_new - rn))
                if rn_new <= rn + 1e-14 * max(1.0, abs(rn)):
                    accepted = True
                    break
            t /= 2
        if not accepted:
            # stalled at a point that is stationary up to rounding: either the
            # proposed move is tiny in the V metric or some trial step leaves
            # R_n unchanged to working precision
            try:
                g_full, _ = normalize_direction(struct, gamma_raw)
                step = metric_step(data, struct, beta, gamma, beta_new, g_full, sigma)
            except NotPositiveDefinite:
                step = np.inf
            flat = smallest <= 1e-9 * max(1.0, abs(rn))
            if step < np.sqrt(config.step_tol) or flat:
                return beta, gamma, norm, it, True
            raise NoDescent(f"no objective decrease after {config.max_halving} halvings")
        step = float(np.max(np.abs(np.concatenate([b - beta, g - gamma]))))
        beta, gamma, rn = b, g, rn_new
        norm = _score_norm(data, struct, beta, gamma, sigma, loss1, w)
        if step < config.step_tol:
            return beta, gamma, norm, it, True
    return beta, gamma, norm, config.max_iter, norm < config.tol


def mm_fit(
    data: Dataset,
    struct: LinearCovStructure,
    loss0: Loss,
    loss1: Loss,
    config: MMConfig | None = None,
    *,
    b0: float | None = None,
    weights: ArrayLike | None = None,
    initial: SFit | None = None,
    start: tuple[ArrayLike, ArrayLike] | None = None,
) -> FitResult:
    """Three-stage MM fit.

    1. S-estimate ``(beta0, theta0)`` (computed unless ``initial`` is given).
    2. M-scale ``sigma_n`` of the distances under ``V(gamma0)``, then held fixed.
    3. Minimize ``R_n(beta, V(gamma))`` over ``|V(gamma)| = 1`` by reweighting
       with step-halving, starting at ``start`` (a ``(beta, gamma)`` pair) or
       at the S-estimate.

    Returns ``theta = sigma_n^2 gamma``.  ``rn_check`` records whether the
    final objective does not exceed the objective at the S-estimate.
    """
    config = config or MMConfig()
    if not check_nesting(loss0, loss1):
        raise ValueError("rho1/sup rho1 must not exceed rho0/sup rho0")
    if b0 is None:
        b0 = consistency_b0(loss0, data.k)
    w = normalize_weights(weights, data.n)
    if initial is None:
        initial = fit_initial_s(data, struct, loss0, config.s_config, b0=b0, weights=w)
    beta0 = np.asarray(initial.beta, dtype=float)
    gamma0, _ = normalize_direction(struct, initial.gamma)
    V0 = struct.evaluate(gamma0)
    sigma = m_scale(mahalanobis_batch(data.residuals(beta0), V0), loss0, b0, w)
    if not sigma > 0:
        raise DegenerateResiduals("auxiliary scale is zero")
    r0 = objective_Rn(data, beta0, V0, sigma, loss1, w)

    if start is not None:
        b_start = np.asarray(start[0], dtype=float)
        g_start, _ = normalize_direction(struct, np.asarray(start[1], dtype=float))
    else:
        b_start, g_start = beta0, gamma0
    beta, gamma, norm, n_iter, converged = _iterate(
        data, struct, loss1, w, sigma, b_start, g_start, config
    )
    rn = objective_Rn(data, beta, struct.evaluate(gamma), sigma, loss1, w)
    restarted = False
    if rn > r0 + 1e-12 * max(1.0, abs(r0)) and start is not None:
        # a warm start landed in a worse basin than the S-estimate
        beta, gamma, norm, n_iter, converged = _iterate(
            data, struct, loss1, w, sigma, beta0, gamma0, config
        )
        rn = objective_Rn(data, beta, struct.evaluate(gamma), sigma, loss1, w)
        restarted = True
    rn_check = rn <= r0 + 1e-12 * max(1.0, abs(r0))
    return FitResult(
        beta=beta,
        gamma=gamma,
        sigma=sigma,
        theta=sigma * sigma * gamma,
        objective=rn,
        objective_initial=r0,
        score_norm=norm,
        converged=converged,
        n_iter=n_iter,
        seed=config.s_config.seed,
        initial=initial,
        rn_check=rn_check,
        restarted=restarted,
        _basis=np.stack(struct.basis),
    )
