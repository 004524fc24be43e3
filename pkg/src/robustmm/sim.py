"""Simulation harness: elliptical data, Monte-Carlo variances, sensitivity curves, breakdown runs."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from robustmm.asymptotics import (
    EllipticalModel,
    InfluenceInput,
    asymptotic_covariance,
    breakdown_bound,
    compute_constants,
    influence_function,
    solve_c_sigma,
)
from robustmm.errors import RobustMMError
from robustmm.estimators import Dataset, MMConfig, fit_initial_s, mm_fit
from robustmm.loss import RadialLaw, consistency_b0
from robustmm.matrix import cholesky, sym_inv_sqrt

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

    from robustmm.estimators import FitResult
    from robustmm.loss import Loss
    from robustmm.structures import LinearCovStructure

log = logging.getLogger(__name__)

__all__ = [
    "BreakdownReport",
    "Contamination",
    "Design",
    "MCReport",
    "SensitivityReport",
    "SimConfig",
    "empirical_breakdown",
    "generate_dataset",
    "monte_carlo_variance",
    "sensitivity_curve",
    "sqrt_psd",
]


def sqrt_psd(a: ArrayLike) -> NDArray[np.float64]:
    """Symmetric square root of a positive definite matrix."""
    a = np.asarray(a, dtype=float)
    cholesky(a)
    w, q = np.linalg.eigh(a)
    return (q * np.sqrt(w)) @ q.T


@dataclass(frozen=True)
class Design:
    """Design generator.

    ``kind="fixed"`` repeats ``matrix`` (``k x q``) for every subject;
    ``kind="location"`` is ``fixed`` with the identity; ``kind="gaussian"``
    draws every entry of ``X_i`` independently from N(0, 1).
    """

    kind: str = "location"
    matrix: tuple[tuple[float, ...], ...] | None = None
    q: int | None = None

    def dims(self, k: int) -> int:
        if self.kind == "location":
            return k
        if self.kind == "fixed":
            return len(self.matrix[0])
        if self.kind == "gaussian":
            return int(self.q)
        raise ValueError(f"unknown design kind {self.kind!r}")

    def draw(self, rng: np.random.Generator, n: int, k: int) -> NDArray[np.float64]:
        if self.kind == "location":
            return np.broadcast_to(np.eye(k), (n, k, k)).copy()
        if self.kind == "fixed":
            x = np.asarray(self.matrix, dtype=float)
            if x.shape[0] != k:
                raise ValueError("fixed design must have k rows")
            return np.broadcast_to(x, (n, *x.shape)).copy()
        if self.kind == "gaussian":
            return rng.standard_normal((n, k, int(self.q)))
        raise ValueError(f"unknown design kind {self.kind!r}")

    def expected_xtax(self, a: ArrayLike, k: int) -> NDArray[np.float64]:
        """Exact ``E[X' A X]`` under the design law."""
        a = np.asarray(a, dtype=float)
        if self.kind == "location":
            return a.copy()
        if self.kind == "fixed":
            x = np.asarray(self.matrix, dtype=float)
            return x.T @ a @ x
        return np.trace(a) * np.eye(int(self.q))


@dataclass(frozen=True)
class Contamination:
    """Replace the first ``round(fraction n)`` errors by the fixed standardized point ``z``."""

    fraction: float
    z: tuple[float, ...]

    def __post_init__(self) -> None:
        if not 0.0 <= self.fraction < 1.0:
            raise ValueError("contamination fraction must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class SimConfig:
    """Data-generating model and replication settings.

    Student errors are ``N(0, I) / sqrt(chi2_nu / nu)``; with
    ``standardize=True`` and ``nu > 2`` they are rescaled to identity
    covariance.
    """

    struct: LinearCovStructure
    beta: tuple[float, ...]
    theta: tuple[float, ...]
    n: int
    design: Design = field(default_factory=Design)
    law: str = "normal"
    nu: float | None = None
    standardize: bool = True
    replications: int = 1
    seed: int = 0
    contamination: Contamination | None = None

    def __post_init__(self) -> None:
        k = self.struct.k
        q = self.design.dims(k)
        if len(self.beta) != q:
            raise ValueError(f"beta has length {len(self.beta)}, design has q={q}")
        if self.n < k + q + 1:
            raise ValueError(f"n={self.n} must be at least k+q+1={k + q + 1}")
        if self.law not in ("normal", "student"):
            raise ValueError(f"unknown law {self.law!r}")
        if self.law == "student" and not (self.nu and self.nu > 0):
            raise ValueError("student law needs nu > 0")
        if self.replications < 0:
            raise ValueError("replications must be nonnegative")
        cholesky(self.Sigma)

    @property
    def Sigma(self) -> NDArray[np.float64]:
        return self.struct.evaluate(np.asarray(self.theta, dtype=float))

    @property
    def k(self) -> int:
        return self.struct.k

    def radial_law(self) -> RadialLaw:
        if self.law == "normal":
            return RadialLaw.normal(self.k)
        return RadialLaw.student(self.nu, self.k)

    def error_scale(self) -> float:
        """Multiplier applied to raw Student draws."""
        if self.law == "student" and self.standardize and self.nu > 2:
            return math.sqrt((self.nu - 2) / self.nu)
        return 1.0

    def exx(self) -> NDArray[np.float64]:
        return self.design.expected_xtax(np.linalg.inv(self.Sigma), self.k)


def generate_dataset(cfg: SimConfig, replication: int = 0) -> Dataset:
    """Draw ``y_i = X_i beta* + Sigma^{1/2} z_i``; the stream is seeded by ``(seed, replication)``."""
    rng = np.random.default_rng([cfg.seed, replication])
    n, k = cfg.n, cfg.k
    X = cfg.design.draw(rng, n, k)
    z = rng.standard_normal((n, k))
    if cfg.law == "student":
        z = z / np.sqrt(rng.chisquare(cfg.nu, n) / cfg.nu)[:, None] * cfg.error_scale()
    if cfg.contamination is not None:
        m = int(round(cfg.contamination.fraction * n))
        z[:m] = np.asarray(cfg.contamination.z, dtype=float)
    root = sqrt_psd(cfg.Sigma)
    y = np.einsum("nkq,q->nk", X, np.asarray(cfg.beta, dtype=float)) + z @ root
    return Dataset(y, X)


@dataclass(frozen=True)
class TargetComparison:
    empirical: NDArray[np.float64]
    theory: NDArray[np.float64]
    rel_frobenius: float
    noise_frobenius: float


@dataclass(frozen=True)
class MCReport:
    """Empirical ``n Cov`` of the estimates against the limiting covariances.

    ``noise_frobenius`` is the Frobenius norm of the entrywise Monte-Carlo
    standard errors relative to the theory norm.  ``cross_z`` is the
    largest ``|entry| / SE`` of the empirical ``beta``-``gamma`` cross
    covariance.
    """

    seed: int
    replications: int
    failures: int
    c_sigma: float
    targets: dict[str, TargetComparison]
    cross_z: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "replications": self.replications,
            "failures": self.failures,
            "c_sigma": self.c_sigma,
            "cross_z": self.cross_z,
            "targets": {
                name: {
                    "rel_frobenius": t.rel_frobenius,
                    "noise_frobenius": t.noise_frobenius,
                    "empirical": t.empirical.tolist(),
                    "theory": t.theory.tolist(),
                }
                for name, t in self.targets.items()
            },
        }


def _one_replication(args) -> tuple[NDArray[np.float64], ...] | None:
    cfg, loss0, loss1, mm_config, b0, rep = args
    data = generate_dataset(cfg, rep)
    try:
        fit = mm_fit(data, cfg.struct, loss0, loss1, mm_config, b0=b0)
    except (RobustMMError, np.linalg.LinAlgError) as exc:
        log.debug("replication %d failed: %s", rep, exc)
        return None
    return fit.beta, fit.gamma, fit.theta


def _run_replications(cfg, loss0, loss1, mm_config, b0, threads: int):
    jobs = [(cfg, loss0, loss1, mm_config, b0, rep) for rep in range(cfg.replications)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_one_replication, jobs, chunksize=4))
    return [_one_replication(j) for j in jobs]


def _cov_with_se(x: NDArray[np.float64], y: NDArray[np.float64]):
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    prod = np.einsum("ri,rj->rij", xc, yc)
    m = prod.shape[0]
    return prod.mean(axis=0), prod.std(axis=0, ddof=1) / math.sqrt(m)


def monte_carlo_variance(
    cfg: SimConfig,
    loss0: Loss,
    loss1: Loss,
    mm_config: MMConfig | None = None,
    *,
    threads: int = 1,
) -> MCReport:
    """Compare ``n Cov`` of ``beta``, ``gamma`` and ``theta`` with the limit theory.

    The targets are ``beta*``, ``gamma* = theta*/|Sigma|^{1/k}`` and
    ``theta1(P) = theta*/c_sigma^2``.  Failed fits are counted and skipped.
    """
    if cfg.replications < 2:
        raise ValueError("need at least two replications")
    b0 = consistency_b0(loss0, cfg.k)
    law = cfg.radial_law()
    scale = cfg.error_scale()
    c_sigma = solve_c_sigma(loss0, law, b0) if cfg.law != "normal" else 1.0
    # generated errors are scale * Student draws, so the scatter of z is scale^2 I
    sigma_true = cfg.Sigma * scale**2
    theta_true = np.asarray(cfg.theta, dtype=float) * scale**2
    consts = compute_constants(loss0, loss1, cfg.k, c_sigma, law=law, b0=b0)
    model = EllipticalModel(
        cfg.struct,
        np.asarray(cfg.beta, dtype=float),
        theta_true,
        cfg.design.expected_xtax(np.linalg.inv(sigma_true), cfg.k),
    )
    det_root = model.det_root()
    truths = {
        "beta": model.beta,
        "gamma": theta_true / det_root,
        "theta": theta_true / c_sigma**2,
    }
    results = _run_replications(cfg, loss0, loss1, mm_config or MMConfig(), b0, threads)
    ok = [r for r in results if r is not None]
    failures = len(results) - len(ok)
    if len(ok) < 2:
        raise RobustMMError("fewer than two replications succeeded")
    root_n = math.sqrt(cfg.n)
    devs = {
        name: root_n * (np.array([r[i] for r in ok]) - truths[name])
        for i, name in enumerate(("beta", "gamma", "theta"))
    }
    targets = {}
    for name, d in devs.items():
        emp, se = _cov_with_se(d, d)
        th = asymptotic_covariance(model, consts, name)
        norm = np.linalg.norm(th)
        targets[name] = TargetComparison(
            emp, th, float(np.linalg.norm(emp - th) / norm), float(np.linalg.norm(se) / norm)
        )
    cross, cross_se = _cov_with_se(devs["beta"], devs["gamma"])
    cross_z = float(np.max(np.abs(cross) / cross_se))
    return MCReport(cfg.seed, cfg.replications, failures, c_sigma, targets, cross_z)


@dataclass(frozen=True)
class SensitivityReport:
    """Finite-difference quotients ``(T_h - T_0)/h`` per target and their ``h -> 0`` limits."""

    h: NDArray[np.float64]
    curves: dict[str, NDArray[np.float64]]
    extrapolated: dict[str, NDArray[np.float64]]
    influence: dict[str, NDArray[np.float64]]
    base: FitResult

    def rel_error(self, target: str) -> float:
        ref = self.influence[target]
        return float(np.linalg.norm(self.extrapolated[target] - ref) / np.linalg.norm(ref))


def _extrapolate(h: NDArray[np.float64], values: NDArray[np.float64]) -> NDArray[np.float64]:
    if h.size == 1:
        return values[0]
    design = np.column_stack([np.ones_like(h), h])
    coef, *_ = np.linalg.lstsq(design, values, rcond=None)
    return coef[0]


def sensitivity_curve(
    data: Dataset,
    struct: LinearCovStructure,
    s0: tuple[ArrayLike, ArrayLike],
    h_grid: ArrayLike,
    loss0: Loss,
    loss1: Loss,
    mm_config: MMConfig | None = None,
    *,
    base: FitResult | None = None,
) -> SensitivityReport:
    """Sensitivity of ``beta``, ``gamma`` and ``theta`` to mass ``h`` at ``s0 = (y0, X0)``.

    Each contaminated fit reweights the sample to ``(1-h) P_n + h delta_{s0}``
    and warm-starts both stages at the clean fit.  The quotients are
    extrapolated linearly to ``h = 0`` and set beside the influence
    functions evaluated at the fitted model with ``c_sigma = 1``.
    """
    mm_config = mm_config or MMConfig()
    b0 = consistency_b0(loss0, data.k)
    if base is None:
        base = mm_fit(data, struct, loss0, loss1, mm_config, b0=b0)
    if not base.converged:
        raise RobustMMError("the clean fit did not converge")
    y0, X0 = s0
    aug = data.append(y0, X0)
    h = np.asarray(h_grid, dtype=float)
    if np.any(h <= 0) or np.any(h >= 1):
        raise ValueError("h values must lie in (0, 1)")
    curves: dict[str, list] = {"beta": [], "gamma": [], "theta": []}
    for hv in h:
        w = np.full(aug.n, (1 - hv) / data.n)
        w[-1] = hv
        init = fit_initial_s(
            aug, struct, loss0, mm_config.s_config, b0=b0, weights=w,
            start=(base.initial.beta, base.initial.theta),
        )
        fit = mm_fit(
            aug, struct, loss0, loss1, mm_config, b0=b0, weights=w,
            initial=init, start=(base.beta, base.gamma),
        )
        curves["beta"].append((fit.beta - base.beta) / hv)
        curves["gamma"].append((fit.gamma - base.gamma) / hv)
        curves["theta"].append((fit.theta - base.theta) / hv)
    arrays = {k: np.array(v) for k, v in curves.items()}
    extrap = {k: _extrapolate(h, v) for k, v in arrays.items()}
    sigma_hat = struct.evaluate(base.theta)
    model = EllipticalModel(
        struct, base.beta, base.theta, data.expected_xtax(np.linalg.inv(sigma_hat))
    )
    consts = compute_constants(loss0, loss1, data.k, b0=b0)
    z0 = sym_inv_sqrt(sigma_hat) @ (np.asarray(y0, dtype=float) - np.asarray(X0) @ base.beta)
    inp = InfluenceInput(z0, np.asarray(X0, dtype=float), model, consts)
    infl = {t: influence_function(inp, t) for t in ("beta", "gamma", "theta")}
    return SensitivityReport(h, arrays, extrap, infl, base)


@dataclass(frozen=True)
class BreakdownReport:
    """Smallest replaced fraction that made the fit diverge.

    ``fraction`` is None when no tested ``m`` caused divergence.
    """

    n: int
    fraction: float | None
    m: int | None
    bound: float
    pattern: str
    records: list[dict[str, Any]]
    seed: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _bias(fit: FitResult, struct, beta_c, eig_c) -> tuple[float, float]:
    """``beta`` shift and the worse of the explosion/implosion eigenvalue ratios."""
    eig = np.linalg.eigvalsh(struct.evaluate(fit.theta))
    beta_move = float(np.linalg.norm(fit.beta - beta_c))
    if eig[0] <= 0:
        return beta_move, math.inf
    return beta_move, float(max(eig[-1] / eig_c[-1], eig_c[0] / eig[0]))


def empirical_breakdown(
    data: Dataset,
    struct: LinearCovStructure,
    loss0: Loss,
    loss1: Loss,
    mm_config: MMConfig | None = None,
    *,
    pattern: str = "explosion",
    distances: tuple[float, ...] = (1e2, 1e4, 1e6, 1e8),
    m_max: int | None = None,
    kappa: int | None = None,
    seed: int = 0,
    beta_tol: float | None = None,
    eig_ratio: float = 1e4,
) -> BreakdownReport:
    """Replace ``m = 0, 1, ...`` observations adversarially until the fit diverges.

    ``explosion`` moves the replaced responses to one point at distance
    ``D`` from the clean fit along a fixed direction; ``implosion`` collapses
    them to within ``1/D`` of the fitted centre.  Every ``D`` of the ladder
    is fitted and recorded.  Breakdown needs the bias to be unbounded in
    ``D``, so it is judged at the far end of the ladder: the ``beta`` shift
    exceeds ``beta_tol`` (default ``1e3`` times the clean scale) or an
    eigenvalue ratio against the clean fit exceeds ``eig_ratio``.  A finite
    ``D`` can pull a bounded estimator by about ``D`` itself, which is why
    the near end alone is not conclusive.  Fit errors at any ``D`` count as
    breakdown.
    """
    if pattern not in ("explosion", "implosion"):
        raise ValueError(f"unknown pattern {pattern!r}")
    mm_config = mm_config or MMConfig()
    n, k = data.n, data.k
    b0 = consistency_b0(loss0, k)
    r0 = b0 / loss0.sup_rho
    kappa = k if kappa is None else kappa
    bound = breakdown_bound(n, r0, kappa)
    clean = mm_fit(data, struct, loss0, loss1, mm_config, b0=b0)
    eig_c = np.linalg.eigvalsh(struct.evaluate(clean.theta))
    if beta_tol is None:
        beta_tol = 1e3 * math.sqrt(eig_c[-1])
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    direction = rng.standard_normal(k)
    direction /= np.linalg.norm(direction)
    jitter = rng.standard_normal((n, k))
    m_max = n // 2 + 1 if m_max is None else m_max
    records = []
    distances = tuple(sorted(distances))
    for m in range(0, m_max + 1):
        idx = order[:m]
        broken = False
        for dist in distances:
            y = data.y.copy()
            centre = np.einsum("nkq,q->nk", data.X[idx], clean.beta)
            if pattern == "explosion":
                y[idx] = centre + dist * direction
            else:
                y[idx] = centre + jitter[idx] / dist
            rec: dict[str, Any] = {"m": m, "distance": dist}
            try:
                fit = mm_fit(data.with_y(y), struct, loss0, loss1, mm_config, b0=b0)
                move, ratio = _bias(fit, struct, clean.beta, eig_c)
                hit = dist == distances[-1] and (move > beta_tol or ratio > eig_ratio)
                rec.update(beta_shift=move, eig_ratio=ratio, broken=hit)
                rec["reason"] = "diverged" if hit else "stable"
            except (RobustMMError, np.linalg.LinAlgError) as exc:
                hit = True
                rec.update(broken=True, reason=type(exc).__name__)
            records.append(rec)
            if hit:
                broken = True
                break
        if broken:
            return BreakdownReport(n, m / n, m, bound, pattern, records, seed)
    return BreakdownReport(n, None, None, bound, pattern, records, seed)
