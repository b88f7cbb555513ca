"""Exception types shared across the package."""


class CwivError(Exception):
    """Base class for all package-specific errors."""


class FactorizationError(CwivError):
    """Matrix factorization failed (e.g. an indefinite pivot)."""

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


class RankError(CwivError):
    """A design matrix is rank deficient."""

    def __init__(self, message: str, column: int | None = None):
        super().__init__(message)
        self.column = column


class WeightError(CwivError):
    """Invalid observation weights (negative, all zero, zero mean)."""


class WeakFirstStageError(CwivError):
    """The (weighted) first-stage covariance is numerically zero."""

    def __init__(self, message: str, first_stage: float = 0.0):
        super().__init__(message)
        self.first_stage = first_stage


class DegenerateInstrumentError(CwivError):
    """The instrument does not take both values where required."""


class DegenerateFitError(CwivError):
    """A weight learner cannot be fitted (e.g. single-arm training data)."""


class ConfigError(CwivError):
    """Invalid simulation or experiment configuration."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class NumericalError(CwivError):
    """A numerical routine failed to converge to the requested tolerance."""


class SummaryError(CwivError):
    """Too few successful replications to summarize a cell."""
