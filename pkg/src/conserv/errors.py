"""Exception types shared across the package."""


class ConservError(Exception):
    """Base class for all package-specific failures."""


class DomainError(ConservError, ValueError):
    """Input lies outside the admissible range (space, time, or parameter)."""


class ShapeError(ConservError, ValueError):
    """Array arguments have missing, incompatible, or unsupported shapes."""


class NonUniformGridError(ConservError, ValueError):
    """Operation requires uniform spacing but the grid is non-uniform."""


class ConvergenceError(ConservError, RuntimeError):
    """An iterative solve failed to bracket or reach its tolerance."""


class ConditioningError(ConservError, RuntimeError):
    """A linear system was too ill-conditioned to factor reliably."""

    def __init__(self, message: str, condition_estimate: float | None = None):
        super().__init__(message)
        self.condition_estimate = condition_estimate


class SolverError(ConservError, RuntimeError):
    """A direct linear solve failed (rank deficiency or factorization breakdown)."""


class InsufficientDataError(ConservError, ValueError):
    """Not enough observations for the requested operation."""


class FitError(ConservError, RuntimeError):
    """Hyperparameter search could not produce a usable configuration."""


class MonotonicityError(ConservError, AssertionError):
    """A quantity required to be monotone along a noise schedule was not."""
