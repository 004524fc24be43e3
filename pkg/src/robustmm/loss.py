"""Bounded loss functions, radial-law expectations and tuning constants.

The biweight is the only built-in loss.  New losses subclass :class:`Loss`
and provide ``rho``, ``psi`` (first derivative) and ``dpsi`` (second
derivative) on nonnegative arguments together with the cutoff ``c`` beyond
which ``rho`` is constant.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np
from scipy import integrate, optimize, special, stats

from robustmm.errors import BracketingFailed, NegativeArgument, NonIntegrable

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import ArrayLike, NDArray

__all__ = [
    "Biweight",
    "Loss",
    "RadialLaw",
    "check_nesting",
    "consistency_b0",
    "radial_expectation",
    "rho_eval",
    "tune_c0",
]


class Loss(ABC):
    """A loss satisfying: rho(0)=0, non-decreasing on [0, c], constant beyond c."""

    c: float

    @abstractmethod
    def rho(self, s: ArrayLike) -> NDArray[np.float64]: ...

    @abstractmethod
    def psi(self, s: ArrayLike) -> NDArray[np.float64]:
        """First derivative of ``rho``."""

    @abstractmethod
    def dpsi(self, s: ArrayLike) -> NDArray[np.float64]:
        """Second derivative of ``rho``."""

    @property
    def sup_rho(self) -> float:
        return float(self.rho(np.array([self.c]))[0])

    def u(self, s: ArrayLike) -> NDArray[np.float64]:
        """Weight ``psi(s)/s``."""
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.psi(s) / s
        return np.where(s == 0, self._u_at_zero(), out)

    def v(self, s: ArrayLike) -> NDArray[np.float64]:
        """Weight ``psi(s)*s``."""
        s = np.asarray(s, dtype=float)
        return self.psi(s) * s

    def _u_at_zero(self) -> float:
        h = 1e-8 * self.c
        return float(self.psi(np.array([h]))[0] / h)

    def sup_psi(self) -> float:
        """``sup |rho'(s)|`` by bounded maximization on (0, c)."""
        return _bounded_max(lambda s: abs(float(self.psi(np.array([s]))[0])), self.c)

    def sup_psi_s(self) -> float:
        """``sup |rho'(s) s|`` by bounded maximization on (0, c)."""
        return _bounded_max(lambda s: abs(float(self.v(np.array([s]))[0])), self.c)


def _bounded_max(f: Callable[[float], float], c: float) -> float:
    res = optimize.minimize_scalar(
        lambda s: -f(s), bounds=(0.0, c), method="bounded", options={"xatol": 1e-12 * c}
    )
    return float(-res.fun)


@dataclass(frozen=True)
class Biweight(Loss):
    """Tukey's biweight with cutoff ``c``."""

    c: float

    def __post_init__(self) -> None:
        if not (self.c > 0 and math.isfinite(self.c)):
            raise ValueError(f"cutoff must be positive and finite, got {self.c}")

    @property
    def sup_rho(self) -> float:
        return self.c * self.c / 6.0

    def rho(self, s):
        # clipping at c lands exactly on c^2/6 in the constant region
        t = np.minimum(np.abs(np.asarray(s, dtype=float)), self.c)
        c2 = self.c * self.c
        t2 = t * t
        return t2 / 2.0 - t2 * t2 / (2.0 * c2) + t2 * t2 * t2 / (6.0 * c2 * c2)

    def psi(self, s):
        s = np.asarray(s, dtype=float)
        x = 1.0 - (s / self.c) ** 2
        return np.where(np.abs(s) <= self.c, s * x * x, 0.0)

    def dpsi(self, s):
        s = np.asarray(s, dtype=float)
        x = (s / self.c) ** 2
        return np.where(np.abs(s) <= self.c, (1.0 - x) * (1.0 - 5.0 * x), 0.0)

    def u(self, s):
        s = np.asarray(s, dtype=float)
        x = 1.0 - (s / self.c) ** 2
        return np.where(np.abs(s) <= self.c, x * x, 0.0)

    def _u_at_zero(self) -> float:
        return 1.0


def rho_eval(loss: Loss, s: float) -> tuple[float, float, float, float, float]:
    """Return ``(rho, rho', rho'', u, v)`` at a single nonnegative ``s``."""
    if s < 0:
        raise NegativeArgument(f"loss arguments are distances, got {s}")
    a = np.array([float(s)])
    return (
        float(loss.rho(a)[0]),
        float(loss.psi(a)[0]),
        float(loss.dpsi(a)[0]),
        float(loss.u(a)[0]),
        float(loss.v(a)[0]),
    )


@dataclass(frozen=True)
class RadialLaw:
    """Law of ``||z||`` for a spherical ``k``-vector ``z``.

    ``kind`` is ``"normal"`` (chi with ``k`` degrees of freedom) or
    ``"student"`` (radial part of the ``k``-variate Student with ``nu``
    degrees of freedom, unit scatter).
    """

    kind: str
    k: int
    nu: float | None = None

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.kind == "student":
            if self.nu is None or not self.nu > 0:
                raise ValueError("student law needs nu > 0")
        elif self.kind != "normal":
            raise ValueError(f"unknown radial law {self.kind!r}")

    @classmethod
    def normal(cls, k: int) -> RadialLaw:
        return cls("normal", int(k))

    @classmethod
    def student(cls, nu: float, k: int) -> RadialLaw:
        return cls("student", int(k), float(nu))

    def logpdf(self, r: ArrayLike) -> NDArray[np.float64]:
        r = np.asarray(r, dtype=float)
        k = self.k
        with np.errstate(divide="ignore"):
            logr = np.log(r)
        if self.kind == "normal":
            logc = -(k / 2 - 1) * math.log(2.0) - special.gammaln(k / 2)
            out = logc + (k - 1) * logr - r * r / 2
        else:
            nu = self.nu
            logc = (
                math.log(2.0)
                + special.gammaln((nu + k) / 2)
                - special.gammaln(nu / 2)
                - special.gammaln(k / 2)
                - (k / 2) * math.log(nu)
            )
            out = logc + (k - 1) * logr - (nu + k) / 2 * np.log1p(r * r / nu)
        if k == 1:
            return out
        return np.where(r > 0, out, -np.inf)

    def pdf(self, r: ArrayLike) -> NDArray[np.float64]:
        return np.exp(self.logpdf(r))

    def upper(self, tail: float = 1e-12) -> float:
        """Radius beyond which the law has mass below ``tail``."""
        if self.kind == "normal":
            return math.sqrt(self.k) + 12.0
        return math.sqrt(self.k * stats.f.isf(tail, self.k, self.nu))

    def sample(self, rng: np.random.Generator, size: int) -> NDArray[np.float64]:
        chi2 = rng.chisquare(self.k, size)
        if self.kind == "normal":
            return np.sqrt(chi2)
        return np.sqrt(chi2 / (rng.chisquare(self.nu, size) / self.nu))


def radial_expectation(
    law: RadialLaw,
    g: Callable[[float], float],
    *,
    breakpoints: Sequence[float] = (),
    growth: float = 0.0,
) -> float:
    """Compute ``E[g(||z||)]`` by adaptive Gauss-Kronrod quadrature.

    Parameters
    ----------
    law : RadialLaw
    g : callable
        Scalar function of the radius.
    breakpoints : sequence of float
        Radii where ``g`` has kinks (loss cutoffs); the range is split there.
    growth : float
        Polynomial growth order of ``g``; for Student laws the expectation
        exists only when ``growth < nu``.
    """
    if law.kind == "student" and growth >= law.nu:
        raise NonIntegrable(
            f"integrand grows like r^{growth}, Student({law.nu}) has no such moment"
        )
    if law.kind == "student":
        return _student_expectation(law, g, breakpoints, growth)
    logpdf = law.logpdf
    upper = law.upper()

    def integrand(r: float) -> float:
        if r <= 0.0 and law.k > 1:
            return 0.0
        return g(r) * math.exp(float(logpdf(r)))

    edges = [0.0, *sorted({float(b) for b in breakpoints if 0.0 < b < upper}), upper]
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        val, _ = integrate.quad(integrand, a, b, epsabs=1e-13, epsrel=1e-12, limit=400)
        total += val
    return total


def _student_expectation(
    law: RadialLaw, g: Callable[[float], float], breakpoints: Sequence[float], growth: float
) -> float:
    # t = R^2/(nu + R^2) is Beta(k/2, nu/2); endpoint powers go into QUADPACK's
    # algebraic weights so heavy tails and k=1 need no truncation
    nu, k = law.nu, law.k
    a, b = k / 2.0 - 1.0, nu / 2.0 - 1.0
    lognorm = special.betaln(k / 2.0, nu / 2.0)
    tail = growth / 2.0

    def radius(t: float) -> float:
        return math.sqrt(nu * t / (1.0 - t))

    cuts = sorted({bp * bp / (nu + bp * bp) for bp in breakpoints if bp > 0})
    edges = [0.0, *cuts, 1.0]
    last = len(edges) - 2
    total = 0.0
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        wl = a if i == 0 else 0.0
        wr = b - tail if i == last else 0.0

        def f(t: float, i=i) -> float:
            # QAWS samples the endpoints themselves, so clip instead of zeroing
            t = min(max(t, 0.0), 1.0 - 2.0**-53)
            logw = -lognorm
            if i != 0:
                logw += a * math.log(t)
            if i != last:
                logw += b * math.log1p(-t)
            else:
                logw += tail * math.log1p(-t)
            return g(radius(t)) * math.exp(logw)

        val, _ = integrate.quad(
            f, lo, hi, weight="alg", wvar=(wl, wr), epsabs=1e-13, epsrel=1e-12, limit=400
        )
        total += val
    return total


def consistency_b0(loss: Loss, k: int) -> float:
    """``E[rho(||z||)]`` for ``z`` standard normal in ``R^k``."""
    return radial_expectation(
        RadialLaw.normal(k), lambda r: float(loss.rho(r)), breakpoints=(loss.c,)
    )


def tune_c0(k: int, target_bdp: float = 0.5) -> float:
    """Biweight cutoff with ``b0 / (c^2/6) = target_bdp`` at the normal model."""
    if not 0.0 < target_bdp < 1.0:
        raise ValueError("target_bdp must lie in (0, 1)")

    def ratio(c: float) -> float:
        return consistency_b0(Biweight(c), k) / (c * c / 6.0) - target_bdp

    # the ratio decreases from 1 (c -> 0) to 0 (c -> inf)
    lo, hi = 1e-3, 1.0
    while ratio(hi) > 0:
        hi *= 2.0
        if hi > 1e4:
            raise BracketingFailed(f"no cutoff found for k={k}, bdp={target_bdp}")
    if ratio(lo) < 0:
        raise BracketingFailed(f"no cutoff found for k={k}, bdp={target_bdp}")
    return float(optimize.brentq(ratio, lo, hi, xtol=1e-13, rtol=1e-14))


def check_nesting(loss0: Loss, loss1: Loss, *, grid_points: int = 4001) -> bool:
    """Check ``rho1/sup rho1 <= rho0/sup rho0`` on a dense grid over ``[0, 2 c1]``."""
    if isinstance(loss0, Biweight) and isinstance(loss1, Biweight):
        analytic = loss0.c <= loss1.c
    else:
        analytic = None
    s = np.linspace(0.0, 2.0 * max(loss0.c, loss1.c), grid_points)
    r0 = loss0.rho(s) / loss0.sup_rho
    r1 = loss1.rho(s) / loss1.sup_rho
    on_grid = bool(np.all(r1 <= r0 + 1e-12))
    if analytic is not None and analytic != on_grid:
        # grid resolution cannot separate near-equal cutoffs; trust the reduction
        return analytic
    return on_grid
