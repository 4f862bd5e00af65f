"""Exception hierarchy shared by all delayfolio modules."""

from __future__ import annotations


class DelayfolioError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(DelayfolioError, ValueError):
    """Invalid model or run configuration."""


class ConstraintError(DelayfolioError, ValueError):
    """Model parameters violate a structural constraint."""


class IncompleteMarketError(ConstraintError):
    """Operation requires a complete market (m == N, sigma invertible)."""


class MissingHistoryError(DelayfolioError, ValueError):
    """Pre-time-0 factor history does not cover the delay window."""


class NumericalError(DelayfolioError, ArithmeticError):
    """A numerical routine failed."""


class SingularMatrixError(NumericalError):
    """sigma sigma* is numerically singular at some state."""

    def __init__(self, message: str, cond: float = float("inf")):
        super().__init__(message)
        self.cond = cond


class NonFiniteError(NumericalError):
    """A simulated quantity became NaN or infinite."""

    def __init__(self, what: str, step: int, path: int):
        super().__init__(f"non-finite {what} at step {step}, path {path}")
        self.what = what
        self.step = step
        self.path = path


class BlowUpError(NumericalError):
    """ODE solution exceeded the blow-up threshold."""

    def __init__(self, t_blow: float, threshold: float):
        super().__init__(f"solution exceeded {threshold:g} near t={t_blow:.6g}")
        self.t_blow = t_blow
        self.threshold = threshold


class RankDeficiencyError(NumericalError):
    """Regression design matrix is rank deficient."""

    def __init__(self, step: int, rank: int, n_features: int):
        super().__init__(
            f"design matrix at step {step} has rank {rank} < {n_features} features"
        )
        self.step = step
        self.rank = rank
        self.n_features = n_features


class PicardDivergenceError(NumericalError):
    """Picard sweeps grew the sup-change of p-hat two sweeps in a row."""

    def __init__(self, deltas: list[float]):
        super().__init__(f"Picard sweeps diverging: sup-changes {deltas}")
        self.deltas = list(deltas)


class ExponentOverflowError(NumericalError, OverflowError):
    """An exponent exceeded the safe range for exp()."""

    def __init__(self, max_exponent: float, limit: float = 700.0):
        super().__init__(f"exponent {max_exponent:.6g} exceeds {limit:g}")
        self.max_exponent = max_exponent
        self.limit = limit


class MartingaleEstimateError(NumericalError):
    """Estimated M(t) is non-positive on some path."""

    def __init__(self, step: int, path: int):
        super().__init__(f"M estimate <= 0 at step {step}, path {path}")
        self.step = step
        self.path = path
