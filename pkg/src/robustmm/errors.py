"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class RobustMMError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(RobustMMError, ValueError):
    """A matrix required to be positive definite failed its Cholesky test."""


class NegativeArgument(RobustMMError, ValueError):
    pass


class NonIntegrable(RobustMMError, ValueError):
    """The requested expectation does not exist under the radial law."""


class BracketingFailed(RobustMMError, RuntimeError):
    pass


class NotIdentifiable(RobustMMError, ValueError):
    """The basis matrix of a covariance structure is rank deficient."""


class DegenerateResiduals(RobustMMError, ValueError):
    """Too many exact fits: the M-scale equation has no positive root."""


class SingularSubsample(RobustMMError, RuntimeError):
    pass


class NoDescent(RobustMMError, RuntimeError):
    """Step-halving was exhausted without decreasing the objective."""


class NonPositiveGamma1(RobustMMError, ValueError):
    pass


class PreconditionViolated(RobustMMError, ValueError):
    pass


class TooLarge(RobustMMError, ValueError):
    pass
