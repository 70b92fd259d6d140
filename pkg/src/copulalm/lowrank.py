"""Algebra for covariances of the form S = diag(w) + a a^T.

This structured family admits O(d) identities that the dense routines in
:mod:`copulalm.oracles` deliberately do not share:

* log-determinant by the matrix determinant lemma,
* inverse quadratic forms by Sherman-Morrison,
* a closed-form Cholesky factor from a single prefix recursion.

All operations are pure functions over immutable value types.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FactorizationError, ShapeError

# Smallest admissible diagonal entry. Inference heads clamp their ReLU output
# here so the covariance stays positive definite even at activation zeros.
W_FLOOR = 1e-4


@dataclass(frozen=True)
class DiagRankOneCov:
    """Covariance S = diag(w) + a a^T with w elementwise >= W_FLOOR."""

    w: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        a = np.asarray(self.a, dtype=np.float64)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "a", a)
        if w.ndim != 1 or a.ndim != 1 or w.shape != a.shape:
            raise ShapeError(f"w and a must be equal-length vectors, got {w.shape} and {a.shape}")
        if w.size < 1:
            raise ShapeError("dimension must be at least 1")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(a))):
            raise ValueError("w and a must be finite")
        if np.any(w < W_FLOOR * (1.0 - 1e-12)):
            raise ValueError(f"all diagonal entries must be >= {W_FLOOR}, got min {w.min()}")

    @property
    def dim(self) -> int:
        return self.w.size


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular L with positive diagonal and L L^T = diag(w) + a a^T."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        object.__setattr__(self, "matrix", m)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError(f"Cholesky factor must be square, got {m.shape}")
        if np.any(np.diag(m) <= 0.0):
            raise ValueError("Cholesky factor needs a strictly positive diagonal")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def cholesky(cov: DiagRankOneCov) -> CholeskyFactor:
    """Closed-form Cholesky factor of diag(w) + a a^T in O(d) arithmetic.

    Below the diagonal the factor is rank-one, L[i, j] = a[i] * b[j], so only
    the diagonal delta and the column scaling b need the prefix recursion

        t_j = w_j + a_j^2 r_{j-1},  delta_j = sqrt(t_j),
        b_j = a_j r_{j-1} / delta_j,  r_j = r_{j-1} w_j / t_j,  r_{-1} = 1.

    Raises:
        FactorizationError: if a pivot is not strictly positive (cannot happen
            for inputs satisfying the type invariants, kept as a guard).
    """
    w, a = cov.w, cov.a
    d = cov.dim
    delta = np.empty(d)
    b = np.empty(d)
    r = 1.0
    for j in range(d):
        t = w[j] + a[j] * a[j] * r
        if not t > 0.0:
            raise FactorizationError(f"non-positive pivot {t} at index {j}")
        delta[j] = np.sqrt(t)
        b[j] = a[j] * r / delta[j]
        r = r * w[j] / t
    lower = np.tril(np.outer(a, b), -1)
    np.fill_diagonal(lower, delta)
    return CholeskyFactor(lower)


def log_det(cov: DiagRankOneCov) -> float:
    """log det(diag(w) + a a^T) by the matrix determinant lemma."""
    return float(np.sum(np.log(cov.w)) + np.log1p(np.sum(cov.a * cov.a / cov.w)))


def inv_quadratic_form(cov: DiagRankOneCov, q: np.ndarray) -> np.ndarray:
    """q^T S^{-1} q via Sherman-Morrison, never forming S^{-1}.

    ``q`` may be a single d-vector or a stack shaped (..., d); the result has
    the leading shape (a 0-d array for a single vector).
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != cov.dim:
        raise ShapeError(f"q has trailing dimension {q.shape[-1]}, expected {cov.dim}")
    u = q / cov.w
    alpha = u @ cov.a
    beta = 1.0 + np.sum(cov.a * cov.a / cov.w)
    return np.sum(q * u, axis=-1) - alpha * alpha / beta


def diag_of(cov: DiagRankOneCov) -> np.ndarray:
    """Marginal variances (diagonal of S): w_i + a_i^2."""
    return cov.w + cov.a * cov.a


def sample(chol: CholeskyFactor, eps: np.ndarray) -> np.ndarray:
    """Map standard-normal draws through the factor: returns L @ eps."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (chol.dim,):
        raise ShapeError(f"eps must have shape ({chol.dim},), got {eps.shape}")
    return chol.matrix @ eps


def dense(cov: DiagRankOneCov) -> np.ndarray:
    """Explicit d x d matrix diag(w) + a a^T (reference path for oracles)."""
    return np.diag(cov.w) + np.outer(cov.a, cov.a)
