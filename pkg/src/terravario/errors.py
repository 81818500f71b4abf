"""Exception hierarchy.

``DataError`` subclasses signal problems with inputs or pipeline state and
map to CLI exit status 2; ``ConfigError`` maps to exit status 1.
"""


class TerravarioError(Exception):
    """Base class for all package errors."""


class ConfigError(TerravarioError, ValueError):
    """Invalid configuration or hyperparameters."""


class DataError(TerravarioError):
    """Base class for data and pipeline failures."""


class SchemaError(DataError):
    """CSV header does not match the expected layout."""


class ParseError(DataError):
    """A cell could not be parsed as a number."""


class OrderingError(DataError):
    """Timestamps are not strictly increasing."""


class GapError(DataError):
    """No EMI readings fall inside a sweep's resampling window."""


class CoverageError(DataError):
    """Radar sweeps fall outside the GPS time span."""


class DimensionError(DataError, ValueError):
    """Feature dimension does not match the fitted state."""


class DegenerateTargetError(DataError):
    """Target variance is zero, standardization is undefined."""


class DegenerateCorrelationError(DataError):
    """Pearson correlation is undefined for a constant input."""


class EmptyVariogramError(DataError):
    """No point pairs fall within the maximum lag."""


class FitError(DataError):
    """Spherical fit failed; carries the best parameters found so far."""

    def __init__(self, message, best=None, rss=None):
        super().__init__(message)
        self.best = best
        self.rss = rss


class UndefinedNSRError(DataError):
    """Nugget-to-sill ratio requested for a zero sill."""


class ConditioningError(DataError):
    """Covariance matrix could not be factorized even with jitter."""


class PipelineError(DataError):
    """A pipeline stage cannot proceed (e.g. empty dataset after filtering)."""
