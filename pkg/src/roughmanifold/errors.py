"""Exception hierarchy.

Errors fall into three families that the command line maps to exit codes:
usage problems (bad input shapes, bad configuration), domain problems
(a precondition of the mathematics fails) and numeric problems (divergence,
explosion, non-convergence).
"""
from __future__ import annotations


class RoughManifoldError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(RoughManifoldError, ValueError):
    """Malformed input: wrong shapes, unknown keys, unparsable files."""

    exit_code = 2


class DimensionError(UsageError):
    pass


class OffGridError(UsageError):
    pass


class ConfigError(UsageError):
    pass


class DomainError(RoughManifoldError):
    """A mathematical precondition does not hold for the given input."""

    exit_code = 3


class PreconditionError(DomainError):
    pass


class OffManifoldError(DomainError):
    pass


class ChartNotFoundError(DomainError):
    pass


class DegenerateChartError(DomainError):
    pass


class MembershipError(DomainError):
    pass


class EndpointMismatchError(DomainError):
    pass


class NumericError(RoughManifoldError):
    """Iterative procedures that failed to converge or blew up."""

    exit_code = 4


class SewingDivergence(NumericError):
    def __init__(self, message: str, worst_interval: int | None = None):
        super().__init__(message)
        self.worst_interval = worst_interval


class ExplosionError(NumericError):
    def __init__(self, message: str, time: float | None = None):
        super().__init__(message)
        self.time = time


class BasinError(NumericError):
    pass


class ConditioningError(NumericError):
    pass
