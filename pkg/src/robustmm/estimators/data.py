"""Balanced observations ``(y_i, X_i)`` with common block dimension ``k``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

__all__ = ["Dataset", "normalize_weights"]


@dataclass(frozen=True, eq=False)
class Dataset:
    """``n`` responses ``y`` of shape ``(n, k)`` with designs ``X`` of shape ``(n, k, q)``."""

    y: NDArray[np.float64]
    X: NDArray[np.float64]

    def __post_init__(self) -> None:
        y = np.array(self.y, dtype=float)
        X = np.array(self.X, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if X.ndim == 2:
            # one common design for every subject
            X = np.broadcast_to(X, (y.shape[0], *X.shape)).copy()
        if y.ndim != 2 or X.ndim != 3:
            raise ValueError("y must be (n, k) and X must be (n, k, q)")
        if X.shape[:2] != y.shape:
            raise ValueError(f"X shape {X.shape} does not match y shape {y.shape}")
        if y.shape[0] < 1:
            raise ValueError("a dataset needs at least one observation")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise ValueError("data contain non-finite values")
        y.setflags(write=False)
        X.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)

    @classmethod
    def location(cls, y: ArrayLike) -> Dataset:
        """Location-scatter data: every ``X_i`` is the identity."""
        y = np.asarray(y, dtype=float)
        k = y.shape[1]
        return cls(y, np.broadcast_to(np.eye(k), (y.shape[0], k, k)))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.y.shape[1]

    @property
    def q(self) -> int:
        return self.X.shape[2]

    def fitted(self, beta: ArrayLike) -> NDArray[np.float64]:
        return np.einsum("nkq,q->nk", self.X, np.asarray(beta, dtype=float))

    def residuals(self, beta: ArrayLike) -> NDArray[np.float64]:
        return self.y - self.fitted(beta)

    def with_y(self, y: ArrayLike) -> Dataset:
        return Dataset(np.asarray(y, dtype=float), self.X)

    def subset(self, idx: ArrayLike) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.X[idx])

    def append(self, y0: ArrayLike, X0: ArrayLike) -> Dataset:
        y0 = np.asarray(y0, dtype=float).reshape(1, self.k)
        X0 = np.asarray(X0, dtype=float).reshape(1, self.k, self.q)
        return Dataset(np.vstack([self.y, y0]), np.concatenate([self.X, X0]))

    def expected_xtax(self, a: ArrayLike, weights: ArrayLike | None = None) -> NDArray[np.float64]:
        """Sample average of ``X_i' A X_i``."""
        w = normalize_weights(weights, self.n)
        wx = (self.X * w[:, None, None]).reshape(-1, self.q)
        return wx.T @ (np.asarray(a, dtype=float) @ self.X).reshape(-1, self.q)


def normalize_weights(weights: ArrayLike | None, n: int) -> NDArray[np.float64]:
    """Probability weights summing to one (uniform when ``weights`` is None)."""
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be a nonnegative vector with one entry per observation")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights must not all be zero")
    return w / total
