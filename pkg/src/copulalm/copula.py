"""Gaussian-copula density, posterior decomposition, and both noise transforms.

The copula log-density of a covariance S relative to its own Gaussian
marginals, evaluated at a point q in quantile space, is

    log c(q) = sum_i log s_i - 0.5 log det(S) + 0.5 q^T (D^{-1} - S^{-1}) q

with D = diag(S) and s_i = sqrt(S_ii). This is the unique form for which
exp(log c) integrates to one over the unit square (density of the joint over
the product of its marginals); the quadrature oracle enforces exactly that.
Everything is computed with the O(d) identities from :mod:`copulalm.lowrank`,
no dense inverse is ever formed.

The functions with a ``_graph`` suffix build the same quantities as
differentiable :class:`copulalm.autodiff.Var` nodes for use inside the
training objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DomainError, ShapeError
from .lowrank import CholeskyFactor, DiagRankOneCov, diag_of, inv_quadratic_form, log_det

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class CopulaSample:
    """A quantile-space draw q ~ N(0, S) with its unit-cube companion u.

    u_i = Phi(q_i / s_i) where s_i = sqrt(S_ii), so each u_i lies in (0, 1).
    """

    q: np.ndarray
    u: np.ndarray


def log_copula_density(cov: DiagRankOneCov, q: np.ndarray) -> np.ndarray:
    """Log Gaussian-copula density at quantile-space point(s) ``q``.

    ``q`` may be a single d-vector or a stack shaped (..., d). Identically
    zero when the covariance is diagonal (independence copula).
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != cov.dim:
        raise ShapeError(f"q has trailing dimension {q.shape[-1]}, expected {cov.dim}")
    variances = diag_of(cov)
    sum_log_sigma = 0.5 * np.sum(np.log(variances))
    quad_diag = np.sum(q * q / variances, axis=-1)
    return sum_log_sigma - 0.5 * log_det(cov) + 0.5 * (quad_diag - inv_quadratic_form(cov, q))


def reparam_copula_sample(chol: CholeskyFactor, eps: np.ndarray) -> CopulaSample:
    """Deterministic map eps -> q = L eps, with the companion u = Phi(q_i/s_i)."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (chol.dim,):
        raise ShapeError(f"eps must have shape ({chol.dim},), got {eps.shape}")
    q = chol.matrix @ eps
    sigma = np.sqrt(np.sum(chol.matrix * chol.matrix, axis=1))
    u = 0.5 * ad._erfc_vec(-(q / sigma) / np.sqrt(2.0))
    return CopulaSample(q=q, u=u)


def gaussian_log_marginals_sum(mu: np.ndarray, sigma: np.ndarray, z: np.ndarray) -> float:
    """Sum of marginal normal log-densities: sum_i log N(z_i; mu_i, sigma_i^2)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if not (mu.shape == sigma.shape == z.shape):
        raise ShapeError(f"shape mismatch: {mu.shape}, {sigma.shape}, {z.shape}")
    if np.any(sigma <= 0.0):
        raise DomainError("all sigma_i must be positive")
    d = mu.shape[-1]
    return float(-np.sum(np.log(sigma)) - np.sum((z - mu) ** 2 / (2.0 * sigma * sigma))
                 - 0.5 * d * _LOG_2PI)


def joint_log_posterior(mu, sigma, cov: DiagRankOneCov, z, q) -> float:
    """Joint log-density split as copula term plus factorized marginals."""
    return float(log_copula_density(cov, q)) + gaussian_log_marginals_sum(mu, sigma, z)


def probability_integral_transform(z, mu, sigma) -> np.ndarray:
    """Map z through its own marginal CDFs: u_i = Phi((z_i - mu_i)/sigma_i)."""
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise DomainError("all sigma_i must be positive")
    return 0.5 * ad._erfc_vec(-((z - mu) / sigma) / np.sqrt(2.0))


# ---------------------------------------------------------------------------
# differentiable builders used by the training objective
# ---------------------------------------------------------------------------

def log_copula_density_graph(w: ad.Var, a: ad.Var, q: ad.Var) -> ad.Var:
    """Batched differentiable log copula density; (B,d) inputs -> (B,)."""
    variances = ad.add(w, ad.square(a))
    sum_log_sigma = ad.vsum(ad.log(variances), axis=1) * 0.5
    quad_diag = ad.vsum(ad.mul(ad.square(q), ad.reciprocal(variances)), axis=1)
    quad_full = ad.inv_quad_low_rank(w, a, q)
    return sum_log_sigma - 0.5 * ad.logdet_low_rank(w, a) + 0.5 * (quad_diag - quad_full)


def log_marginals_sum_graph(mu: ad.Var, logvar: ad.Var, z: ad.Var) -> ad.Var:
    """Batched differentiable sum of marginal normal log-densities; -> (B,)."""
    d = mu.v.shape[-1]
    diff = ad.sub(z, mu)
    quad = ad.mul(ad.square(diff), ad.exp(ad.neg(logvar)))
    return ad.vsum(logvar * -0.5 - quad * 0.5, axis=1) - 0.5 * d * _LOG_2PI
