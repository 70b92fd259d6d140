"""Brute-force reference implementations used only by tests and `verify`.

Nothing here shares code with the fast paths it checks: dense factorizations
are textbook O(d^3) loops, the copula normalization is plain tensor-product
Simpson quadrature with doubling refinement, and the KL / sampling-law checks
are direct Monte Carlo.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OracleError, ShapeError
from .lowrank import DiagRankOneCov
from .special_functions import std_normal_quantile


@dataclass(frozen=True)
class QuadratureSpec:
    """Controls the doubling Simpson refinement for the normalization check."""

    initial_resolution: int = 16
    tolerance: float = 1e-3
    max_resolution: int = 4096
    clip: float = 1e-6

    def __post_init__(self):
        if self.initial_resolution < 16:
            raise ValueError("resolution must be at least 16")
        if self.tolerance <= 0.0:
            raise ValueError("tolerance must be positive")


@dataclass(frozen=True)
class DenseReference:
    logdet: float
    inverse: np.ndarray
    cholesky: np.ndarray


def _dense_cholesky(matrix: np.ndarray) -> np.ndarray:
    """Textbook Cholesky-Crout on an explicit dense matrix."""
    d = matrix.shape[0]
    lower = np.zeros((d, d))
    for i in range(d):
        for j in range(i + 1):
            acc = matrix[i, j] - np.dot(lower[i, :j], lower[j, :j])
            if i == j:
                if acc <= 0.0:
                    raise OracleError(f"matrix not positive definite at pivot {i}")
                lower[i, j] = np.sqrt(acc)
            else:
                lower[i, j] = acc / lower[j, j]
    return lower


def _solve_lower(lower: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    d = lower.shape[0]
    x = np.zeros_like(rhs)
    for i in range(d):
        x[i] = (rhs[i] - np.dot(lower[i, :i], x[:i])) / lower[i, i]
    return x


def _solve_upper(upper: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    d = upper.shape[0]
    x = np.zeros_like(rhs)
    for i in range(d - 1, -1, -1):
        x[i] = (rhs[i] - np.dot(upper[i, i + 1:], x[i + 1:])) / upper[i, i]
    return x


def dense_reference(cov: DiagRankOneCov) -> DenseReference:
    """Log-determinant, inverse, and Cholesky factor of the explicit matrix.

    The matrix is formed densely and factored with schoolbook loops; the
    inverse comes from forward/back substitution column by column.

    Raises:
        OracleError: for dimensions above 256 or numerically singular input.
    """
    if cov.dim > 256:
        raise OracleError("dense reference limited to d <= 256")
    matrix = np.diag(cov.w) + np.outer(cov.a, cov.a)
    lower = _dense_cholesky(matrix)
    logdet = float(2.0 * np.sum(np.log(np.diag(lower))))
    d = cov.dim
    inverse = np.zeros((d, d))
    eye = np.eye(d)
    for j in range(d):
        y = _solve_lower(lower, eye[:, j])
        inverse[:, j] = _solve_upper(lower.T, y)
    return DenseReference(logdet=logdet, inverse=inverse, cholesky=lower)


def _simpson_weights(n: int) -> np.ndarray:
    # composite Simpson on n intervals (n even), n+1 points
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / 3.0


def copula_normalization_2d(log_density_fn, cov: DiagRankOneCov,
                            spec: QuadratureSpec | None = None):
    """Integrate exp(log copula density) over the unit square.

    ``log_density_fn(cov, q)`` must accept stacked quantile points shaped
    (..., 2). The substitution q_i = s_i * Phi^{-1}(u_i) maps the u-grid to
    quantile space; u is clipped to [clip, 1-clip] and the excluded mass
    (at most 4*clip, since the marginals of a copula are uniform) is folded
    into the reported error bound.

    Returns:
        (integral, error_bound) where error_bound combines the refinement
        difference and the clipped-mass bound.

    Raises:
        OracleError: if doubling the resolution never meets the tolerance.
    """
    if cov.dim != 2:
        raise ShapeError("normalization quadrature is 2-D only")
    spec = spec or QuadratureSpec()
    sigma = np.sqrt(cov.w + cov.a * cov.a)

    def integral_at(n: int) -> float:
        u = np.linspace(spec.clip, 1.0 - spec.clip, n + 1)
        quantiles = np.array([std_normal_quantile(p) for p in u])
        q1 = sigma[0] * quantiles
        q2 = sigma[1] * quantiles
        w = _simpson_weights(n)
        h = (1.0 - 2.0 * spec.clip) / n
        total = 0.0
        # evaluate in row blocks so refined grids stay within memory
        block = max(1, (1 << 22) // (n + 1))
        for start in range(0, n + 1, block):
            stop = min(n + 1, start + block)
            points = np.empty((stop - start, n + 1, 2))
            points[:, :, 0] = q1[start:stop, None]
            points[:, :, 1] = q2[None, :]
            values = np.exp(log_density_fn(cov, points))
            total += float(np.einsum("i,j,ij->", w[start:stop], w, values))
        return h * h * total

    n = spec.initial_resolution
    prev = integral_at(n)
    while n <= spec.max_resolution:
        n *= 2
        cur = integral_at(n)
        diff = abs(cur - prev)
        if diff <= spec.tolerance:
            return cur, diff + 4.0 * spec.clip
        prev = cur
    raise OracleError(f"quadrature did not converge; last estimate {prev}")


def mc_kl_estimate(mu: np.ndarray, logvar: np.ndarray, n: int, seed: int):
    """Monte-Carlo KL(N(mu, diag(exp(logvar))) || N(0, I)) with standard error."""
    if n < 10_000:
        raise ValueError("need at least 10^4 samples for a usable estimate")
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    sigma = np.exp(0.5 * logvar)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, mu.size))
    z = mu + sigma * eps
    log_q = -0.5 * np.sum(eps * eps + logvar + np.log(2.0 * np.pi), axis=1)
    log_p = -0.5 * np.sum(z * z + np.log(2.0 * np.pi), axis=1)
    diffs = log_q - log_p
    return float(diffs.mean()), float(diffs.std(ddof=1) / np.sqrt(n))


def mc_kl_fullcov_estimate(mu: np.ndarray, cov: DiagRankOneCov, n: int, seed: int):
    """Monte-Carlo KL(N(mu, diag(w) + a a^T) || N(0, I)) with standard error.

    Sampling and the log-density both go through the dense textbook Cholesky,
    independent of the low-rank fast path.
    """
    if n < 10_000:
        raise ValueError("need at least 10^4 samples for a usable estimate")
    mu = np.asarray(mu, dtype=np.float64)
    matrix = np.diag(cov.w) + np.outer(cov.a, cov.a)
    lower = _dense_cholesky(matrix)
    logdet = float(2.0 * np.sum(np.log(np.diag(lower))))
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, cov.dim))
    z = mu + eps @ lower.T
    log_q = -0.5 * (np.sum(eps * eps, axis=1) + logdet + cov.dim * np.log(2.0 * np.pi))
    log_p = -0.5 * (np.sum(z * z, axis=1) + cov.dim * np.log(2.0 * np.pi))
    diffs = log_q - log_p
    return float(diffs.mean()), float(diffs.std(ddof=1) / np.sqrt(n))


def mc_covariance(chol_matrix: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Sample covariance of n draws of L @ eps, eps ~ N(0, I)."""
    if n < 10_000:
        raise ValueError("need at least 10^4 samples for a usable estimate")
    chol_matrix = np.asarray(chol_matrix, dtype=np.float64)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, chol_matrix.shape[0]))
    draws = eps @ chol_matrix.T
    return np.cov(draws, rowvar=False, ddof=1)
