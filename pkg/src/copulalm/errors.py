"""Semantic exception hierarchy shared across the package."""


class CopulaLMError(Exception):
    """Base class for all package errors."""


class DomainError(CopulaLMError, ValueError):
    """Input outside a function's mathematical domain (non-finite, p not in (0,1), ...)."""


class ShapeError(CopulaLMError, ValueError):
    """Dimension mismatch between arrays that must agree."""


class InputError(CopulaLMError, ValueError):
    """Bad user-supplied data (out-of-vocabulary ids, empty corpus, ...)."""


class ConfigError(CopulaLMError, ValueError):
    """Invalid or inconsistent configuration."""


class NumericError(CopulaLMError, RuntimeError):
    """Non-finite values or numerical breakdown during computation."""


class FactorizationError(NumericError):
    """Cholesky factorization hit a non-positive pivot."""


class CheckpointError(CopulaLMError, RuntimeError):
    """Checkpoint file is corrupt, truncated, or from an unknown format version."""


class OracleError(CopulaLMError, RuntimeError):
    """A verification oracle could not produce a trustworthy reference value."""
