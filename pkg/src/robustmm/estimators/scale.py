"""M-scale: the ``sigma`` solving ``mean rho0(d_i / sigma) = b0``."""

from __future__ import annotations

import math
from typing import TYPE_CHECKING

import numpy as np
from scipy import optimize

from robustmm.errors import BracketingFailed, DegenerateResiduals
from robustmm.estimators.data import normalize_weights

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

    from robustmm.loss import Loss

__all__ = ["check_c0", "m_scale", "m_scale_batch"]


def check_c0(d: NDArray[np.float64], w: NDArray[np.float64], loss0: Loss, b0: float) -> None:
    """Raise :class:`DegenerateResiduals` unless the zero-distance mass is below ``1 - b0/sup rho0``."""
    sup = loss0.sup_rho
    if not 0.0 < b0 < sup:
        raise ValueError(f"b0={b0} must lie strictly between 0 and sup rho0={sup}")
    zero_mass = float(w[d <= 0.0].sum())
    if zero_mass >= 1.0 - b0 / sup - 1e-14:
        raise DegenerateResiduals(
            f"{zero_mass:.3g} of the mass sits on exact fits; at most {1 - b0 / sup:.3g} allowed"
        )


def m_scale(
    distances: ArrayLike,
    loss0: Loss,
    b0: float,
    weights: ArrayLike | None = None,
    *,
    rtol: float = 4 * np.finfo(float).eps,
) -> float:
    """Solve ``sum_i w_i rho0(d_i / sigma) = b0`` for ``sigma > 0``.

    The left-hand side is non-increasing in ``sigma``; the root is bracketed
    by doubling/halving from a median-based start and refined with Brent's
    method.

    Raises
    ------
    DegenerateResiduals
        If too many distances are exactly zero for a positive root to exist.
    BracketingFailed
        If no sign change is found within 400 doublings.
    """
    d = np.asarray(distances, dtype=float).ravel()
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite and nonnegative")
    w = normalize_weights(weights, d.size)
    check_c0(d, w, loss0, b0)

    def excess(sigma: float) -> float:
        return float(w @ loss0.rho(d / sigma)) - b0

    pos = d[d > 0]
    start = float(np.median(pos)) if pos.size else 1.0
    lo = hi = start
    for _ in range(400):
        if excess(lo) > 0:
            break
        lo /= 2.0
    else:
        raise BracketingFailed("could not bracket the M-scale from below")
    for _ in range(400):
        if excess(hi) <= 0:
            break
        hi *= 2.0
    else:
        raise BracketingFailed("could not bracket the M-scale from above")
    if excess(hi) == 0.0:
        return hi
    return float(optimize.brentq(excess, lo, hi, xtol=1e-300, rtol=rtol, maxiter=500))


def m_scale_batch(
    distances: ArrayLike, loss0: Loss, b0: float, *, iterations: int = 45
) -> NDArray[np.float64]:
    """Row-wise M-scales of a ``(m, n)`` distance array by vectorized bisection.

    Rows violating the exact-fit condition get ``nan``.  Accuracy is about
    ``log(hi/lo) / 2**iterations`` in relative terms, enough for ranking
    candidate fits.
    """
    d = np.atleast_2d(np.asarray(distances, dtype=float))
    m, n = d.shape
    sup = loss0.sup_rho
    zero_frac = np.mean(d <= 0.0, axis=1)
    ok = zero_frac < 1.0 - b0 / sup - 1e-14
    out = np.full(m, np.nan)
    if not np.any(ok):
        return out
    dd = d[ok]
    dpos = np.where(dd > 0, dd, np.inf)
    lo = np.log(np.min(dpos, axis=1) / loss0.c)
    hi = np.log(np.sqrt(np.mean(dd * dd, axis=1) / (2 * b0)) + 1e-300)
    hi = np.maximum(hi, lo + 1e-12)

    def excess(logs: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.mean(loss0.rho(dd / np.exp(logs)[:, None]), axis=1) - b0

    # rho(s) <= s^2/2 does not hold for every loss: widen where needed
    for _ in range(200):
        bad = excess(hi) > 0
        if not np.any(bad):
            break
        hi = np.where(bad, hi + math.log(2.0), hi)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        above = excess(mid) > 0
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    out[ok] = np.exp(0.5 * (lo + hi))
    return out
