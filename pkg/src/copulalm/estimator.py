"""Scikit-learn style front door for the whole toolkit.

``CopulaLM`` is a ``BaseEstimator``: hyperparameters are constructor
arguments, ``fit`` trains on a list of sentences, and fitted state lives in
trailing-underscore attributes. ``get_params`` / ``set_params`` / ``clone``
work as usual, so weight sweeps compose with the usual model-selection
machinery.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import InputError
from .evaluation import EvalReport, evaluate, sample_from_prior
from .training import (AdamState, TrainingConfig, load_checkpoint,
                       save_checkpoint, train)


def _check_corpus(X, name: str) -> list:
    if X is None:
        raise InputError(f"{name} must be a non-empty sequence of sentences")
    lines = list(X)
    if not lines:
        raise InputError(f"{name} is empty")
    for item in lines:
        if not isinstance(item, str):
            raise InputError(f"{name} must contain strings, found {type(item).__name__}")
    return lines


class CopulaLM(BaseEstimator):
    """Variational LSTM language model with a copula posterior regularizer.

    Parameters mirror :class:`copulalm.training.TrainingConfig`;
    ``copula_weight`` is the weight of the joint-posterior log-density term
    (0 recovers the mean-field baseline).
    """

    def __init__(self, mode="copula", copula_weight=0.4, latent_dim=32, hidden_dim=200,
                 embed_dim=200, vocab_max=20000, max_len=200, batch_size=32, epochs=30,
                 lr=1e-3, dropout=0.5, anneal_warmup_steps=-1, seed=0, deterministic=True,
                 shared_noise=False, anneal_copula=False, scalar_w=False,
                 out_dir=None, grad_check=True):
        self.mode = mode
        self.copula_weight = copula_weight
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.vocab_max = vocab_max
        self.max_len = max_len
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr = lr
        self.dropout = dropout
        self.anneal_warmup_steps = anneal_warmup_steps
        self.seed = seed
        self.deterministic = deterministic
        self.shared_noise = shared_noise
        self.anneal_copula = anneal_copula
        self.scalar_w = scalar_w
        self.out_dir = out_dir
        self.grad_check = grad_check

    def _config(self) -> TrainingConfig:
        return TrainingConfig(
            mode=self.mode, copula_weight=self.copula_weight, latent_dim=self.latent_dim,
            hidden_dim=self.hidden_dim, embed_dim=self.embed_dim, vocab_max=self.vocab_max,
            max_len=self.max_len, batch_size=self.batch_size, epochs=self.epochs,
            lr=self.lr, dropout=self.dropout, anneal_warmup_steps=self.anneal_warmup_steps,
            seed=self.seed, deterministic=self.deterministic, shared_noise=self.shared_noise,
            anneal_copula=self.anneal_copula, scalar_w=self.scalar_w)

    def fit(self, X, y=None, validation=None):
        """Train on sentences ``X``; ``validation`` defaults to ``X`` itself."""
        lines = _check_corpus(X, "X")
        valid = _check_corpus(validation, "validation") if validation is not None else lines
        if self.out_dir is None:
            self._tmpdir_ = tempfile.TemporaryDirectory(prefix="copulalm_")
            run_dir = Path(self._tmpdir_.name)
        else:
            run_dir = Path(self.out_dir)
        result = train(self._config(), lines, valid, run_dir, grad_check=self.grad_check)
        self.params_ = result.params
        self.vocab_ = result.vocab
        self.config_ = result.config
        self.train_result_ = result
        return self

    def _require_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit before using this estimator")

    def evaluate(self, X, diversity_samples: int = 0) -> EvalReport:
        self._require_fitted()
        return evaluate(self.params_, self.config_, self.vocab_,
                        _check_corpus(X, "X"), diversity_samples=diversity_samples)

    def perplexity(self, X) -> float:
        return self.evaluate(X).ppl

    def score(self, X, y=None) -> float:
        """Negative per-token bound (higher is better), for model selection."""
        report = self.evaluate(X)
        return -(report.nll * report.sentences_evaluated) / report.tokens_evaluated

    def sample(self, n: int, seed: int | None = None) -> list:
        self._require_fitted()
        return sample_from_prior(self.params_, self.config_, self.vocab_, n,
                                 seed=self.seed if seed is None else seed)

    def save(self, path) -> None:
        self._require_fitted()
        adam = AdamState.for_params(self.params_)
        best_val = 0.0
        result = getattr(self, "train_result_", None)
        if result is not None:
            best_val = result.best_val_objective
            if Path(result.last_path).exists():
                adam = load_checkpoint(result.last_path).adam
        progress = {"epoch": self.config_.epochs - 1, "global_step": 0, "best_val": best_val}
        save_checkpoint(path, self.params_, adam, self.config_, self.vocab_, progress)

    @classmethod
    def load(cls, path) -> "CopulaLM":
        bundle = load_checkpoint(path)
        cfg = bundle.config
        est = cls(**{name: getattr(cfg, name) for name in (
            "mode", "copula_weight", "latent_dim", "hidden_dim", "embed_dim", "vocab_max",
            "max_len", "batch_size", "epochs", "lr", "dropout", "anneal_warmup_steps",
            "seed", "deterministic", "shared_noise", "anneal_copula", "scalar_w")})
        est.params_ = bundle.params
        est.vocab_ = bundle.vocab
        est.config_ = cfg
        return est
