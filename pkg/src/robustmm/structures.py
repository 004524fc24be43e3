"""Linear covariance structures ``V(theta) = sum_j theta_j L_j``."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Any

import numpy as np

from robustmm.errors import NotIdentifiable, NotPositiveDefinite
from robustmm.matrix import cholesky, duplication_matrix, logdet, vec

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import ArrayLike, NDArray

__all__ = [
    "LinearCovStructure",
    "build_lme",
    "build_stationary_lag",
    "build_unstructured",
    "evaluate_V",
    "fisher_gram",
    "normalize_direction",
    "project_theta",
    "structure_from_descriptor",
    "weighted_project_theta",
]

# smallest singular value of L relative to the largest
IDENT_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class LinearCovStructure:
    """Covariance structure spanned by symmetric basis matrices.

    Attributes
    ----------
    basis : tuple of ndarray
        The ``l`` symmetric ``k x k`` matrices ``L_1, ..., L_l``.
    name : str
        Label used in reports.
    descriptor : dict
        JSON-serializable description that rebuilds the structure.
    """

    basis: tuple[NDArray[np.float64], ...]
    name: str = "custom"
    descriptor: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.basis:
            raise ValueError("a structure needs at least one basis matrix")
        k = self.basis[0].shape[0]
        for b in self.basis:
            if b.shape != (k, k):
                raise ValueError("basis matrices must all be k x k")
            if not np.allclose(b, b.T, atol=1e-12):
                raise ValueError("basis matrices must be symmetric")
        sv = np.linalg.svd(self.L, compute_uv=False)
        if sv[-1] <= IDENT_RTOL * sv[0] or sv.size < len(self.basis):
            raise NotIdentifiable(
                f"basis of {self.name!r} is rank deficient (l={len(self.basis)})"
            )
        for b in self.basis:
            b.setflags(write=False)

    @property
    def k(self) -> int:
        return self.basis[0].shape[0]

    @property
    def l(self) -> int:  # noqa: E743
        return len(self.basis)

    @cached_property
    def L(self) -> NDArray[np.float64]:
        """The ``k^2 x l`` matrix ``[vec(L_1) ... vec(L_l)]``."""
        out = np.column_stack([vec(b) for b in self.basis])
        out.setflags(write=False)
        return out

    @cached_property
    def _stacked(self) -> NDArray[np.float64]:
        return np.stack(self.basis)

    def evaluate(self, theta: ArrayLike) -> NDArray[np.float64]:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.l,):
            raise ValueError(f"theta must have length {self.l}, got shape {theta.shape}")
        return np.tensordot(theta, self._stacked, axes=1)

    def to_json(self) -> str:
        return json.dumps(self.descriptor, sort_keys=True)


def evaluate_V(struct: LinearCovStructure, theta: ArrayLike) -> tuple[NDArray[np.float64], bool]:
    """Return ``(V(theta), is_positive_definite)``."""
    v = struct.evaluate(theta)
    try:
        cholesky(v)
    except NotPositiveDefinite:
        return v, False
    return v, True


def project_theta(struct: LinearCovStructure, m: ArrayLike) -> NDArray[np.float64]:
    """Least-squares ``theta`` with ``V(theta)`` closest to ``m`` in Frobenius norm."""
    m = np.asarray(m, dtype=float)
    L = struct.L
    theta, *_ = np.linalg.lstsq(L, vec(m), rcond=None)
    return theta


def weighted_project_theta(
    struct: LinearCovStructure, m: ArrayLike, vinv: ArrayLike
) -> NDArray[np.float64]:
    """Solve ``L'(W)L theta = L'(W) vec(m)`` with ``W = V^{-1} kron V^{-1}``."""
    vinv = np.asarray(vinv, dtype=float)
    m = np.asarray(m, dtype=float)
    left = [vinv @ b @ vinv for b in struct.basis]
    gram = np.array([[np.sum(a * b) for b in struct.basis] for a in left])
    rhs = np.array([np.sum(a * m) for a in left])
    return np.linalg.solve(gram, rhs)


def fisher_gram(struct: LinearCovStructure, sigma: ArrayLike) -> NDArray[np.float64]:
    """``L' (Sigma^{-1} kron Sigma^{-1}) L``, i.e. entries ``tr(S^-1 L_i S^-1 L_j)``."""
    sinv = np.linalg.inv(np.asarray(sigma, dtype=float))
    left = [sinv @ b @ sinv for b in struct.basis]
    return np.array([[np.sum(a * b) for b in struct.basis] for a in left])


def normalize_direction(
    struct: LinearCovStructure, theta: ArrayLike
) -> tuple[NDArray[np.float64], float]:
    """Split ``theta`` into a unit-determinant direction and a scale.

    Returns ``(gamma, scale)`` with ``scale = |V(theta)|^{1/(2k)}`` and
    ``gamma = theta / scale^2``, so that ``|V(gamma)| = 1``.
    """
    theta = np.asarray(theta, dtype=float)
    ld = logdet(struct.evaluate(theta))
    scale = float(np.exp(ld / (2 * struct.k)))
    return theta / (scale * scale), scale


def build_lme(Z: Sequence[ArrayLike], k: int | None = None) -> LinearCovStructure:
    """Variance components ``sigma0^2 I + sum_j sigma_j^2 Z_j Z_j'``.

    ``k`` is only needed when ``Z`` is empty.
    """
    zs = [np.asarray(z, dtype=float) for z in Z]
    zs = [z[:, None] if z.ndim == 1 else z for z in zs]
    if k is None:
        if not zs:
            raise ValueError("k is required when no random-effect design is given")
        k = zs[0].shape[0]
    for z in zs:
        if z.shape[0] != k:
            raise ValueError(f"every Z_j must have k={k} rows, got {z.shape}")
    basis = (np.eye(k), *(z @ z.T for z in zs))
    desc = {"kind": "lme", "k": k, "Z": [z.tolist() for z in zs]}
    return LinearCovStructure(tuple(basis), name="lme", descriptor=desc)


def build_unstructured(k: int) -> LinearCovStructure:
    """Unrestricted covariance with ``theta = vech(Sigma)``; here ``L = D_k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    d = duplication_matrix(k)
    basis = tuple(d[:, j].reshape(k, k, order="F").copy() for j in range(d.shape[1]))
    return LinearCovStructure(basis, name="unstructured", descriptor={"kind": "unstructured", "k": k})


def build_stationary_lag(k: int) -> LinearCovStructure:
    """Toeplitz covariance ``v_st = theta_{|s-t|+1}``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    idx = np.arange(k)
    lag = np.abs(idx[:, None] - idx[None, :])
    basis = tuple((lag == j).astype(float) for j in range(k))
    return LinearCovStructure(basis, name="stationary_lag", descriptor={"kind": "stationary_lag", "k": k})


def structure_from_descriptor(desc: dict[str, Any] | str) -> LinearCovStructure:
    """Build a structure from its JSON descriptor.

    Accepted forms are ``{"kind": "lme", "Z": [...]}`` (a list of ``k x g_j``
    matrices, ``"k"`` required if the list is empty),
    ``{"kind": "unstructured", "k": K}`` and ``{"kind": "stationary_lag", "k": K}``.
    """
    if isinstance(desc, str):
        desc = json.loads(desc)
    kind = desc.get("kind")
    if kind == "lme":
        return build_lme(desc.get("Z", []), k=desc.get("k"))
    if kind == "unstructured":
        return build_unstructured(int(desc["k"]))
    if kind == "stationary_lag":
        return build_stationary_lag(int(desc["k"]))
    raise ValueError(f"unknown structure kind {kind!r}")
