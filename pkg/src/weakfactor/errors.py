"""Exception types raised across the package."""


class WeakFactorError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(WeakFactorError, ValueError):
    """Parameter arrays have inconsistent shapes or violate a hard invariant."""


class DomainError(WeakFactorError, ValueError):
    """A parameter lies outside the domain of a map (for example beta <= 0)."""


class SingularInversionError(WeakFactorError, ArithmeticError):
    """A denominator of the two-factor inverse map vanished."""


class SingularMomentError(WeakFactorError, ArithmeticError):
    """A denominator of a two-factor covariance moment vanished."""


class SingularWeightError(WeakFactorError, ValueError):
    """The moment variance estimate is not safely positive definite."""


class InfeasibleNullError(WeakFactorError, ValueError):
    """The hypothesised value cannot be imposed inside the parameter box."""


class DegenerateJTestError(WeakFactorError, ValueError):
    """The model is just identified, so the J statistic carries no information."""


class DataValidationError(WeakFactorError, ValueError):
    """Input data could not be parsed or is unsuitable for estimation."""


class ReplicationFailureError(WeakFactorError, RuntimeError):
    """Too many Monte Carlo replications failed."""
