"""Evidence-bound bookkeeping: closed-form KL terms, annealing, loss composition.

Sign convention: everything here is in "minimized nats". ``elbo_nll`` is the
negative annealed evidence bound (reconstruction NLL plus weighted KL) and
``modified_objective`` subtracts the weighted joint-posterior log-density, so
gradient descent on ``modified_objective`` maximizes the regularized bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError
from .lowrank import DiagRankOneCov, diag_of, log_det


@dataclass(frozen=True)
class AnnealSchedule:
    """Linear KL warm-up from ``start_weight`` to 1 over ``warmup_steps``."""

    warmup_steps: int
    start_weight: float = 0.0
    kind: str = "linear"


@dataclass
class LossBreakdown:
    """Per-batch (or per-corpus) loss components, all in nats.

    Fields hold floats during logging and autodiff nodes during training;
    the composition is the same affine expression either way.
    """

    rec_nll: object
    kl: object
    log_copula: object
    sum_log_marginals: object
    elbo_nll: object
    modified_objective: object


def kl_diag_gaussian_std_normal(mu: np.ndarray, logvar: np.ndarray) -> float:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)) in closed form."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return float(-0.5 * np.sum(1.0 + logvar - mu * mu - np.exp(logvar)))


def kl_fullcov_gaussian_std_normal(mu: np.ndarray, cov: DiagRankOneCov) -> float:
    """KL(N(mu, diag(w) + a a^T) || N(0, I)) using the low-rank identities."""
    mu = np.asarray(mu, dtype=np.float64)
    trace = float(np.sum(diag_of(cov)))
    return 0.5 * (trace + float(mu @ mu) - cov.dim - log_det(cov))


def anneal_weight(step: int, schedule: AnnealSchedule) -> float:
    """Annealing weight at ``step``: linear ramp to 1, constant 1 afterwards."""
    if step < 0:
        raise ConfigError(f"step must be non-negative, got {step}")
    if schedule.warmup_steps <= 0:
        return 1.0
    frac = min(1.0, step / schedule.warmup_steps)
    w = schedule.start_weight + (1.0 - schedule.start_weight) * frac
    return min(1.0, max(0.0, w))


def _check_finite(value, label: str) -> None:
    raw = value.v if isinstance(value, ad.Var) else value
    if not np.all(np.isfinite(raw)):
        raise NumericError(f"non-finite loss component: {label}")


def compose_loss(rec_nll, kl, log_copula, sum_log_marginals,
                 copula_weight: float, anneal_w: float) -> LossBreakdown:
    """Assemble the annealed bound and the copula-regularized objective.

    Works on floats and on autodiff nodes alike. With ``copula_weight`` zero
    the joint-posterior term is omitted entirely, so the objective (and its
    gradient) is exactly the vanilla annealed bound.
    """
    if copula_weight < 0.0:
        raise ConfigError(f"copula weight must be >= 0, got {copula_weight}")
    if not 0.0 <= anneal_w <= 1.0:
        raise ConfigError(f"anneal weight must be in [0, 1], got {anneal_w}")
    for label, component in (("rec_nll", rec_nll), ("kl", kl), ("log_copula", log_copula),
                             ("sum_log_marginals", sum_log_marginals)):
        _check_finite(component, label)
    elbo_nll = rec_nll + anneal_w * kl
    if copula_weight == 0.0:
        modified = elbo_nll
    else:
        modified = elbo_nll - copula_weight * (log_copula + sum_log_marginals)
    return LossBreakdown(rec_nll=rec_nll, kl=kl, log_copula=log_copula,
                         sum_log_marginals=sum_log_marginals,
                         elbo_nll=elbo_nll, modified_objective=modified)


# ---------------------------------------------------------------------------
# differentiable builders used by the trainer
# ---------------------------------------------------------------------------

def kl_diag_graph(mu: ad.Var, logvar: ad.Var) -> ad.Var:
    """Batched differentiable diagonal KL; (B,d) -> (B,)."""
    inner = 1.0 + logvar - ad.square(mu) - ad.exp(logvar)
    return ad.vsum(inner, axis=1) * -0.5


def kl_fullcov_graph(mu: ad.Var, w: ad.Var, a: ad.Var) -> ad.Var:
    """Batched differentiable full-covariance KL; (B,d) -> (B,)."""
    d = mu.v.shape[-1]
    trace = ad.vsum(ad.add(w, ad.square(a)), axis=1)
    sq_mean = ad.vsum(ad.square(mu), axis=1)
    return (trace + sq_mean - ad.logdet_low_rank(w, a) - float(d)) * 0.5
