"""Linear algebra on the increment basis.

The increment set is ``v_0, ..., v_d`` with ``v_0 = -(v_1 + ... + v_d)``.
Everything downstream works with the ``d x (d+1)`` matrix ``v`` whose
columns are these vectors, and with the convex hull ``Theta`` of the
columns. ``Theta`` is never built as a polytope: linear minimisation only
needs the vertices, and membership reduces to one square solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotPositiveDefinite, SingularBasis, ValidationError

ZERO_SUM_TOL = 1e-12
CONDITION_TOL = 1e-10
SIMPLEX_TOL = 1e-12
INTERIOR_EPS = 1e-12
CONTAINMENT_TOL = 1e-10


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Basis:
    """Increment vectors of the lattice.

    Attributes:
        vectors: ``d x (d+1)`` matrix, column ``j`` is ``v_j``.
        gram: ``v v^T``.
        gram_inv: inverse of ``gram``.
    """

    vectors: np.ndarray
    gram: np.ndarray
    gram_inv: np.ndarray

    def __post_init__(self):
        v = self.vectors
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] != v.shape[0] + 1:
            raise SingularBasis(f"expected a d x (d+1) matrix with d >= 1, got shape {v.shape}")
        scale = max(1.0, float(np.abs(v).max()))
        if np.abs(v.sum(axis=1)).max() > ZERO_SUM_TOL * scale:
            raise SingularBasis("columns of v must sum to zero")
        eig = np.linalg.eigvalsh(self.gram)
        if eig[0] <= CONDITION_TOL * eig[-1]:
            raise SingularBasis("v_1, ..., v_d are (numerically) linearly dependent")

    @property
    def dim(self) -> int:
        return self.vectors.shape[0]

    @property
    def branching(self) -> int:
        return self.vectors.shape[0] + 1

    @property
    def projector(self) -> np.ndarray:
        """``(v v^T)^{-1} v``, the map ``y -> z(y)`` of the affine decomposition.

        Taken from the inverse of the square system ``[1^T; v]^T`` rather
        than from ``gram_inv``, which would square the condition number.
        """
        return self.__dict__.setdefault("_projector", _frozen(np.linalg.inv(self.system.T)[1:]))

    @property
    def system(self) -> np.ndarray:
        """The invertible ``(d+1) x (d+1)`` matrix stacking ``1^T`` over ``v``."""
        return self.__dict__.setdefault(
            "_system", _frozen(np.vstack([np.ones(self.branching), self.vectors]))
        )

    def to_dict(self) -> dict:
        return {"d": self.dim, "vectors": self.vectors[:, 1:].T.tolist()}

    def kernel_for(self, theta) -> np.ndarray:
        """Weights ``p`` with ``1^T p = 1`` and ``v p = theta``.

        ``theta`` may carry leading batch dimensions. The weights are unique;
        ``theta`` lies in ``Theta`` exactly when they are nonnegative.
        """
        theta = np.asarray(theta, dtype=float)
        rhs = np.concatenate([np.ones(theta.shape[:-1] + (1,)), theta], axis=-1)
        return np.linalg.solve(self.system, rhs[..., None])[..., 0]

    def contains(self, theta, tol: float = CONTAINMENT_TOL) -> np.ndarray | bool:
        p = self.kernel_for(theta)
        inside = np.all(p >= -tol, axis=-1)
        return bool(inside) if np.ndim(inside) == 0 else inside


def _basis_from_matrix(v) -> Basis:
    v = np.asarray(v, dtype=float)
    gram = v @ v.T
    try:
        gram_inv = np.linalg.inv(gram)
    except np.linalg.LinAlgError as exc:
        raise SingularBasis(str(exc)) from exc
    return Basis(_frozen(v), _frozen(gram), _frozen(gram_inv))


def basis_from_vectors(vectors) -> Basis:
    """Build a basis from ``v_1, ..., v_d``; ``v_0`` is their negated sum.

    >>> basis_from_vectors([[1.0]]).vectors.tolist()
    [[-1.0, 1.0]]
    """
    vs = np.atleast_2d(np.asarray(vectors, dtype=float))
    d = vs.shape[0]
    if d < 1 or vs.shape != (d, d):
        raise SingularBasis(f"need d vectors of length d, got array of shape {vs.shape}")
    if np.linalg.matrix_rank(vs) < d:
        raise SingularBasis("vectors are linearly dependent")
    cols = vs.T
    v = np.hstack([-cols.sum(axis=1, keepdims=True), cols])
    return _basis_from_matrix(v)


def standard_vectors(d: int) -> np.ndarray:
    """``[-sum(e_j), e_1, ..., e_d]`` as a ``d x (d+1)`` matrix."""
    if d < 1:
        raise ValidationError("dimension must be at least 1")
    eye = np.eye(d)
    return np.hstack([-np.ones((d, 1)), eye])


def basis_from_covariance(sigma) -> Basis:
    """Basis with ``v v^T = sigma``.

    Starts from the standard vectors ``vbar`` and maps them through
    ``C @ inv(Cbar)`` where ``sigma = C C^T`` and ``vbar vbar^T = Cbar Cbar^T``.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    d = sigma.shape[0]
    if sigma.shape != (d, d) or d < 1:
        raise NotPositiveDefinite(f"covariance must be square, got shape {sigma.shape}")
    if not np.allclose(sigma, sigma.T, rtol=1e-12, atol=1e-14 * max(1.0, np.abs(sigma).max())):
        raise NotPositiveDefinite("covariance is not symmetric")
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    vbar = standard_vectors(d)
    chol_bar = np.linalg.cholesky(vbar @ vbar.T)
    v = chol @ np.linalg.solve(chol_bar, vbar)
    return _basis_from_matrix(v)


def basis_from_dict(spec: dict) -> Basis:
    """Inverse of :meth:`Basis.to_dict`; also accepts ``{"covariance": ...}``."""
    if "covariance" in spec:
        return basis_from_covariance(spec["covariance"])
    basis = basis_from_vectors(spec["vectors"])
    if "d" in spec and int(spec["d"]) != basis.dim:
        raise SingularBasis(f"declared d={spec['d']} but {basis.dim} vectors given")
    return basis


def affine_decompose(basis: Basis, y):
    """Unique ``(a, z)`` with ``y = a 1 + v^T z``.

    ``y`` has trailing dimension ``d+1``; leading dimensions are batched.
    """
    y = np.asarray(y, dtype=float)
    a = y.mean(axis=-1)
    z = y @ basis.projector.T
    return a, z


def reconstruct(basis: Basis, a, z) -> np.ndarray:
    return np.asarray(a, dtype=float)[..., None] + np.asarray(z, dtype=float) @ basis.vectors


def theta_min(basis: Basis, z):
    """Minimum of ``theta -> z . theta`` over ``Theta`` and the vertex attaining it.

    Ties go to the lowest vertex index.
    """
    vals = np.asarray(z, dtype=float) @ basis.vectors
    idx = np.argmin(vals, axis=-1)
    value = np.take_along_axis(vals, np.expand_dims(idx, -1), axis=-1)[..., 0]
    if np.ndim(value) == 0:
        return float(value), int(idx)
    return value, idx


def is_simplex(p, tol: float = SIMPLEX_TOL, interior_eps: float | None = None) -> bool:
    """Whether every row of ``p`` is a probability vector.

    With ``interior_eps`` set, entries must also be at least that large.
    """
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        return True
    lower = -tol if interior_eps is None else interior_eps
    return bool(np.all(p >= lower) and np.all(np.abs(p.sum(axis=-1) - 1.0) <= tol * p.shape[-1]))


def kl_divergence(p, q) -> np.ndarray:
    """``sum_j p_j log(p_j / q_j)`` along the last axis, with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)
