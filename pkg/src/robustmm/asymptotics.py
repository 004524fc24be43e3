"""Efficiency constants, influence functions, asymptotic covariances and breakdown bounds.

Everything here is evaluated at an elliptical model: ``y = X beta + Sigma^{1/2} z``
with ``z`` spherical.  Expectations over ``R = ||z||`` go through
:func:`robustmm.loss.radial_expectation`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import TYPE_CHECKING, Literal

import numpy as np
from scipy import optimize

from robustmm.errors import (
    NonPositiveGamma1,
    NotIdentifiable,
    PreconditionViolated,
    TooLarge,
)
from robustmm.loss import RadialLaw, check_nesting, consistency_b0, radial_expectation
from robustmm.matrix import cholesky, logdet, sym_inv_sqrt, unvec, vec
from robustmm.structures import fisher_gram

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

    from robustmm.loss import Loss
    from robustmm.structures import LinearCovStructure

__all__ = [
    "AsymptoticConstants",
    "EllipticalModel",
    "InfluenceInput",
    "SweepTable",
    "asymptotic_covariance",
    "breakdown_bound",
    "compute_constants",
    "efficiency_sweep",
    "influence_function",
    "kappa_exact",
    "kappa_general_position",
    "max_bdp_r0",
    "solve_c_sigma",
    "ml_student_constants",
    "student_efficiency_sweep",
    "student_relative_efficiency",
]

Target = Literal["beta", "gamma", "theta", "covariance", "shape"]


@dataclass(frozen=True)
class AsymptoticConstants:
    """Scalar constants of the MM-estimator at a spherical law.

    ``sigma2`` is always ``-2 sigma1 / (k c_sigma^2) + sigma3``.
    ``e_drho0`` is ``E[rho0'(c_sigma R) c_sigma R]``, the denominator in the
    scale part of the covariance influence function.
    """

    loss0: Loss
    loss1: Loss
    k: int
    c_sigma: float
    b0: float
    alpha1: float
    gamma1: float
    sigma1: float
    sigma3: float
    lam: float
    G1: float
    G2: float
    e_drho0: float
    law: RadialLaw

    @property
    def c0(self) -> float:
        return self.loss0.c

    @property
    def c1(self) -> float:
        return self.loss1.c

    @property
    def sigma2(self) -> float:
        return -2.0 * self.sigma1 / (self.k * self.c_sigma**2) + self.sigma3

    def alpha_C(self, s: float) -> float:
        """``k rho1'(s) / (gamma1 s)``, with the limit ``k u1(0) / gamma1`` at zero."""
        return self.k * float(self.loss1.u(np.array([s]))[0]) / self.gamma1

    def beta_C(self, s: float) -> float:
        a = np.array([s])
        v1 = float(self.loss1.v(a)[0])
        r0 = float(self.loss0.rho(a)[0])
        return (v1 / self.gamma1 - 2.0 * (r0 - self.b0) / self.e_drho0) / self.c_sigma**2

    def to_dict(self) -> dict[str, float]:
        return {
            "k": self.k,
            "c0": self.c0,
            "c1": self.c1,
            "c_sigma": self.c_sigma,
            "b0": self.b0,
            "alpha1": self.alpha1,
            "gamma1": self.gamma1,
            "sigma1": self.sigma1,
            "sigma2": self.sigma2,
            "sigma3": self.sigma3,
            "lambda": self.lam,
            "G1": self.G1,
            "G2": self.G2,
        }


def compute_constants(
    loss0: Loss,
    loss1: Loss,
    k: int,
    c_sigma: float = 1.0,
    *,
    law: RadialLaw | None = None,
    b0: float | None = None,
) -> AsymptoticConstants:
    """Evaluate ``alpha1, gamma1, sigma1, sigma3, lambda, G1, G2``.

    Parameters
    ----------
    loss0, loss1 : Loss
        Scale and efficiency losses; ``rho1`` must be nested under ``rho0``.
    k : int
        Block dimension.
    c_sigma : float
        Ratio ``|Sigma|^{1/(2k)} / sigma(P)``; 1 at the consistent normal model.
    law : RadialLaw, optional
        Radial law of ``||z||``; the standard normal (chi with ``k`` degrees
        of freedom) by default.
    b0 : float, optional
        Scale constant; defaults to the normal-model consistency value.

    Raises
    ------
    NonPositiveGamma1
        If ``gamma1 <= 0``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not c_sigma > 0:
        raise ValueError("c_sigma must be positive")
    if not check_nesting(loss0, loss1):
        raise ValueError("rho1/sup rho1 must not exceed rho0/sup rho0")
    law = law or RadialLaw.normal(k)
    if law.k != k:
        raise ValueError("radial law dimension does not match k")
    if b0 is None:
        b0 = consistency_b0(loss0, k)
    return _constants(loss0, loss1, int(k), float(c_sigma), law, float(b0))


@lru_cache(maxsize=4096)
def _constants(
    loss0: Loss, loss1: Loss, k: int, cs: float, law: RadialLaw, b0: float
) -> AsymptoticConstants:
    brk = (loss1.c / cs, loss0.c / cs)

    def ex(g) -> float:
        return radial_expectation(law, g, breakpoints=brk)

    def f1(fn, r):
        return float(fn(np.array([cs * r]))[0])

    alpha1 = ex(lambda r: (1 - 1 / k) * f1(loss1.u, r) + f1(loss1.dpsi, r) / k)
    gamma1 = ex(
        lambda r: f1(loss1.dpsi, r) * (cs * r) ** 2 + (k + 1) * f1(loss1.v, r)
    ) / (k + 2)
    if not gamma1 > 0:
        raise NonPositiveGamma1(f"gamma1={gamma1:.6g} at c1={loss1.c}")
    e_psi_sq = ex(lambda r: f1(loss1.psi, r) ** 2)
    e_v_sq = ex(lambda r: f1(loss1.v, r) ** 2)
    e_drho0 = ex(lambda r: f1(loss0.v, r))
    e_rho0_dev = ex(lambda r: (f1(loss0.rho, r) - b0) ** 2)
    sigma1 = k * e_v_sq / ((k + 2) * gamma1**2)
    sigma3 = 4.0 * e_rho0_dev / e_drho0**2
    lam = e_psi_sq / (cs**2 * k * alpha1**2)
    G1 = loss1.sup_psi() / alpha1
    G2 = k * loss1.sup_psi_s() / ((k + 2) * gamma1)
    return AsymptoticConstants(
        loss0=loss0,
        loss1=loss1,
        k=k,
        c_sigma=cs,
        b0=b0,
        alpha1=alpha1,
        gamma1=gamma1,
        sigma1=sigma1,
        sigma3=sigma3,
        lam=lam,
        G1=G1,
        G2=G2,
        e_drho0=e_drho0,
        law=law,
    )


def solve_c_sigma(loss0: Loss, law: RadialLaw, b0: float | None = None) -> float:
    """``c_sigma`` with ``E[rho0(c_sigma R)] = b0`` under ``law``.

    At the normal law with the consistency constant this is 1; at other
    spherical laws ``theta1(P) = theta* / c_sigma^2``.
    """
    if b0 is None:
        b0 = consistency_b0(loss0, law.k)

    def excess(cs: float) -> float:
        return radial_expectation(law, lambda r: float(loss0.rho(cs * r)), breakpoints=(loss0.c / cs,)) - b0

    lo, hi = 0.5, 2.0
    while excess(lo) > 0:
        lo /= 2.0
    while excess(hi) < 0:
        hi *= 2.0
    return float(optimize.brentq(excess, lo, hi, xtol=1e-14, rtol=1e-13))


def ml_student_constants(
    nu: float, k: int, weight: Literal["standard", "printed"] = "standard"
) -> tuple[float, float]:
    """``(lambda_ML, sigma1_ML)`` of the multivariate-t maximum likelihood estimator.

    ``lambda = k E[w^2 R^2] / (k E[w] + E[w'(R) R])^2`` and
    ``sigma1 = k(k+2) E[w^2 R^4] / (E[w'(R) R^3] + k(k+2))^2`` under the
    Student radial law.  ``weight="standard"`` uses ``w(s) = (nu+k)/(nu+s^2)``;
    ``"printed"`` uses ``(nu+k)/(k+s^2)``.
    """
    if not nu > 0:
        raise ValueError("nu must be positive")
    if weight == "standard":
        a = nu
    elif weight == "printed":
        a = float(k)
    else:
        raise ValueError(f"unknown weight variant {weight!r}")
    law = RadialLaw.student(nu, k)
    num = nu + k

    def w(r):
        return num / (a + r * r)

    def dw(r):
        return -2.0 * num * r / (a + r * r) ** 2

    # every integrand below is bounded in r
    e_w = radial_expectation(law, w)
    e_dwr = radial_expectation(law, lambda r: dw(r) * r)
    e_w2r2 = radial_expectation(law, lambda r: (w(r) * r) ** 2)
    e_w2r4 = radial_expectation(law, lambda r: (w(r) * r * r) ** 2)
    e_dwr3 = radial_expectation(law, lambda r: dw(r) * r**3)
    lam = k * e_w2r2 / (k * e_w + e_dwr) ** 2
    sigma1 = k * (k + 2) * e_w2r4 / (e_dwr3 + k * (k + 2)) ** 2
    return lam, sigma1


def student_relative_efficiency(
    loss0: Loss,
    loss1: Loss,
    nu: float,
    k: int,
    weight: Literal["standard", "printed"] = "standard",
) -> tuple[float, float]:
    """MM over ML ratios of ``lambda`` and ``sigma1`` at the ``k``-variate Student(nu)."""
    mm = compute_constants(loss0, loss1, k, law=RadialLaw.student(nu, k))
    lam_ml, s1_ml = ml_student_constants(nu, k, weight)
    return mm.lam / lam_ml, mm.sigma1 / s1_ml


@dataclass(frozen=True)
class SweepTable:
    """Rows of a cutoff sweep plus the located minima.

    ``columns`` names the row entries; ``minima`` maps a column name to
    ``(argmin c1, row at the argmin)``.
    """

    columns: tuple[str, ...]
    rows: tuple[tuple[float, ...], ...]
    minima: dict[str, tuple[float, tuple[float, ...]]]

    def to_csv(self, digits: int = 6) -> str:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(f"{v:.{digits}g}" for v in row))
        return "\n".join(lines) + "\n"


def _refine_min(f, grid: NDArray[np.float64], values: NDArray[np.float64]) -> float:
    i = int(np.argmin(values))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, grid.size - 1)]
    if hi <= lo:
        return float(grid[i])
    res = optimize.minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-6})
    return float(res.x) if res.fun <= values[i] else float(grid[i])


def efficiency_sweep(
    loss0: Loss,
    k: int,
    c1_grid: ArrayLike,
    *,
    refine: bool = False,
    loss_factory=None,
) -> SweepTable:
    """Constants over a grid of ``c1`` values with minima of ``G1`` and ``G2``.

    With ``refine=True`` each grid minimum is polished by bounded Brent
    search between its grid neighbours.  ``loss_factory`` maps a cutoff to a
    loss (the loss class of ``loss0`` by default).
    """
    grid = np.asarray(c1_grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty c1 grid")
    if np.any(grid < loss0.c - 1e-12):
        raise ValueError("c1 grid values must be >= c0")
    make = loss_factory or type(loss0)

    def row(c1: float) -> tuple[float, ...]:
        c = compute_constants(loss0, make(float(c1)), k)
        return (float(c1), c.lam, c.sigma1, c.G1, c.G2)

    rows = [row(c) for c in grid]
    cols = ("c1", "lambda", "sigma1", "G1", "G2")
    minima = {}
    for name, j in (("G1", 3), ("G2", 4)):
        vals = np.array([r[j] for r in rows])
        if refine:
            arg = _refine_min(lambda c: row(max(c, loss0.c))[j], grid, vals)
            arg = max(arg, loss0.c)
        else:
            arg = float(grid[int(np.argmin(vals))])
        minima[name] = (arg, row(arg))
    return SweepTable(cols, tuple(rows), minima)


def student_efficiency_sweep(
    loss0: Loss,
    nu: float,
    k: int,
    c1_grid: ArrayLike,
    *,
    weight: Literal["standard", "printed"] = "standard",
    refine: bool = False,
    loss_factory=None,
) -> SweepTable:
    """Relative ``lambda`` and ``sigma1`` of MM versus Student ML over ``c1``."""
    grid = np.asarray(c1_grid, dtype=float)
    make = loss_factory or type(loss0)
    lam_ml, s1_ml = ml_student_constants(nu, k, weight)
    law = RadialLaw.student(nu, k)

    def row(c1: float) -> tuple[float, ...]:
        c = compute_constants(loss0, make(float(c1)), k, law=law)
        return (float(c1), c.lam / lam_ml, c.sigma1 / s1_ml)

    rows = [row(c) for c in grid]
    minima = {}
    for name, j in (("lambda_rel", 1), ("sigma1_rel", 2)):
        vals = np.array([r[j] for r in rows])
        if refine:
            arg = max(_refine_min(lambda c: row(max(c, loss0.c))[j], grid, vals), loss0.c)
        else:
            arg = float(grid[int(np.argmin(vals))])
        minima[name] = (arg, row(arg))
    return SweepTable(("c1", "lambda_rel", "sigma1_rel"), tuple(rows), minima)


@dataclass(frozen=True, eq=False)
class EllipticalModel:
    """True parameters ``(beta*, theta*)`` and the design moment ``E[X' Sigma^-1 X]``."""

    struct: LinearCovStructure
    beta: NDArray[np.float64]
    theta: NDArray[np.float64]
    exx: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        if self.exx is not None:
            object.__setattr__(self, "exx", np.asarray(self.exx, dtype=float))
        cholesky(self.Sigma)

    @property
    def Sigma(self) -> NDArray[np.float64]:
        return self.struct.evaluate(self.theta)

    @property
    def k(self) -> int:
        return self.struct.k

    def q_inv(self) -> NDArray[np.float64]:
        """``(L' (Sigma^-1 kron Sigma^-1) L)^-1``."""
        q = fisher_gram(self.struct, self.Sigma)
        try:
            cholesky(q)
        except Exception as exc:
            raise NotIdentifiable("L'(S^-1 kron S^-1)L is singular") from exc
        return np.linalg.inv(q)

    def det_root(self) -> float:
        """``|Sigma|^{1/k}``."""
        return math.exp(logdet(self.Sigma) / self.k)


@dataclass(frozen=True, eq=False)
class InfluenceInput:
    """Contamination point in standardized form.

    ``z0 = Sigma^{-1/2}(y0 - X0 beta*)`` with the symmetric root.
    """

    z0: NDArray[np.float64]
    X0: NDArray[np.float64] | None
    model: EllipticalModel
    constants: AsymptoticConstants

    @classmethod
    def from_observation(
        cls,
        y0: ArrayLike,
        X0: ArrayLike,
        model: EllipticalModel,
        constants: AsymptoticConstants,
    ) -> InfluenceInput:
        X0 = np.asarray(X0, dtype=float)
        e = np.asarray(y0, dtype=float) - X0 @ model.beta
        return cls(sym_inv_sqrt(model.Sigma) @ e, X0, model, constants)


def _check_gamma1(c: AsymptoticConstants) -> None:
    if not c.gamma1 > 0:
        raise NonPositiveGamma1(f"gamma1={c.gamma1}")


def influence_function(inp: InfluenceInput, target: Target) -> NDArray[np.float64]:
    """Influence function at the elliptical model.

    ``beta`` and ``theta``/``gamma`` are vectors; ``covariance`` and
    ``shape`` are ``k x k`` matrices (``L`` times the ``theta`` or ``gamma``
    influence).  ``gamma`` and ``shape`` depend on the constants only through
    ``alpha_C``.
    """
    c = inp.constants
    m = inp.model
    _check_gamma1(c)
    z0 = np.asarray(inp.z0, dtype=float)
    r = float(np.linalg.norm(z0))
    s = c.c_sigma * r
    if target == "beta":
        if m.exx is None or inp.X0 is None:
            raise ValueError("beta influence needs E[X'S^-1X] and X0")
        if c.alpha1 == 0:
            raise ValueError("alpha1 is zero")
        u1 = float(c.loss1.u(np.array([s]))[0])
        rhs = np.asarray(inp.X0, dtype=float).T @ sym_inv_sqrt(m.Sigma) @ z0
        return u1 / c.alpha1 * np.linalg.solve(m.exx, rhs)
    si = sym_inv_sqrt(m.Sigma)
    U = m.struct.L.T @ vec(si @ np.outer(z0, z0) @ si)
    qu = m.q_inv() @ U
    if target in ("theta", "covariance"):
        out = c.alpha_C(s) * qu - c.beta_C(s) * m.theta
    elif target in ("gamma", "shape"):
        # k u1/(sigma(P)^2 gamma1) = c_sigma^2 alpha_C / |Sigma|^{1/k}
        out = c.c_sigma**2 * c.alpha_C(s) / m.det_root() * (qu - r * r / m.k * m.theta)
    else:
        raise ValueError(f"unknown target {target!r}")
    if target in ("covariance", "shape"):
        return unvec(m.struct.L @ out, m.k)
    return out


def _sym(a: NDArray[np.float64]) -> NDArray[np.float64]:
    return 0.5 * (a + a.T)


def asymptotic_covariance(
    model: EllipticalModel, constants: AsymptoticConstants, target: Target
) -> NDArray[np.float64]:
    """Limiting covariance of ``sqrt(n)(estimate - truth)``.

    ``covariance`` and ``shape`` refer to ``vec`` of the ``k x k`` matrix.
    The ``theta``, ``covariance`` and ``shape`` forms divide ``sigma1`` by
    ``c_sigma^2``.
    """
    c = constants
    _check_gamma1(c)
    k = model.k
    cs2 = c.c_sigma**2
    th = model.theta
    if target == "beta":
        if model.exx is None:
            raise ValueError("beta variance needs E[X'S^-1X]")
        return _sym(c.lam * np.linalg.inv(model.exx))
    qinv = model.q_inv()
    L = model.struct.L
    vs = vec(model.Sigma)
    d2 = model.det_root() ** 2
    if target == "gamma":
        out = 2 * c.sigma1 / d2 * (qinv - np.outer(th, th) / k)
    elif target == "theta":
        out = 2 * c.sigma1 / cs2 * qinv + c.sigma2 * np.outer(th, th)
    elif target == "covariance":
        out = 2 * c.sigma1 / cs2 * L @ qinv @ L.T + c.sigma2 * np.outer(vs, vs)
    elif target == "shape":
        out = 2 * c.sigma1 / (cs2 * d2) * (L @ qinv @ L.T - np.outer(vs, vs) / k)
    else:
        raise ValueError(f"unknown target {target!r}")
    return _sym(out)


_FLOOR_TOL = 1e-9


def breakdown_bound(n: int, r0: float, kappa: int, eps_initial: float = 1.0) -> float:
    """Lower bound ``min{eps0, ceil(n r0)/n, (ceil(n - n r0) - kappa)/n}`` on the breakdown point.

    Raises
    ------
    PreconditionViolated
        Unless ``0 < floor(n r0) < n - kappa``.
    """
    nr = n * r0
    fl = math.floor(nr + _FLOOR_TOL)
    if not 0 < fl < n - kappa:
        raise PreconditionViolated(f"need 0 < floor(n r0)={fl} < n - kappa={n - kappa}")
    up = math.ceil(nr - _FLOOR_TOL)
    rest = math.ceil(n - nr - _FLOOR_TOL)
    return min(eps_initial, up / n, (rest - kappa) / n)


def max_bdp_r0(n: int, kappa: int) -> float:
    """Tuning ratio ``r0 = (n - kappa)/(2n)`` that maximizes the bound."""
    return (n - kappa) / (2 * n)


def kappa_general_position(k: int, p: int = 0) -> int:
    """``kappa = k + p`` for data in general position; ``p = 0`` for a common design."""
    return k + p


def kappa_exact(points: ArrayLike, max_n: int = 12, *, atol: float = 1e-9) -> int:
    """Largest number of points on one affine hyperplane, by enumeration.

    Raises
    ------
    TooLarge
        If there are more than ``max_n`` points.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2:
        raise ValueError("points must be an (n, d) array")
    n, d = pts.shape
    if n > max_n:
        raise TooLarge(f"{n} points exceed the enumeration limit {max_n}")
    if n <= d:
        return n
    scale = max(1.0, float(np.max(np.abs(pts))))
    if np.linalg.matrix_rank(pts[1:] - pts[0], tol=atol * scale) < d:
        return n
    best = d
    for idx in itertools.combinations(range(n), d):
        base = pts[list(idx)]
        a = base[1:] - base[0]
        if d > 1:
            _, sv, vt = np.linalg.svd(a)
            if np.sum(sv > atol * scale) < d - 1:
                continue
            normal = vt[-1]
        else:
            normal = np.ones(1)
        on = np.abs((pts - base[0]) @ normal) <= atol * scale
        best = max(best, int(on.sum()))
    return best

