"""Variational language modeling with a Gaussian-copula posterior regularizer.

The public surface: low-rank covariance algebra (:mod:`copulalm.lowrank`),
the copula density and its transforms (:mod:`copulalm.copula`), a verified
reverse-mode gradient engine (:mod:`copulalm.autodiff`), the LSTM model,
trainer and evaluator, and the :class:`CopulaLM` estimator facade.
"""

from .estimator import CopulaLM
from .evaluation import EvalReport, distinct_ratio, evaluate, sample_from_prior
from .lowrank import CholeskyFactor, DiagRankOneCov
from .objective import AnnealSchedule, LossBreakdown
from .training import TrainingConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AnnealSchedule",
    "CholeskyFactor",
    "CopulaLM",
    "DiagRankOneCov",
    "EvalReport",
    "LossBreakdown",
    "TrainingConfig",
    "distinct_ratio",
    "evaluate",
    "load_checkpoint",
    "sample_from_prior",
    "save_checkpoint",
    "train",
    "__version__",
]
