"""Exception hierarchy shared by all regnorm modules."""


class RegnormError(Exception):
    """Base class for all regnorm errors."""


class DomainError(RegnormError):
    """An argument is outside the mathematical domain of the operation."""


class DataError(RegnormError):
    """Malformed numerical input (wrong shape, non-finite entries, ...)."""


class RankError(RegnormError):
    """A matrix fails the required rank condition (full column/row rank)."""


class NumericalError(RegnormError):
    """A numerical kernel (SVD, eigensolver) failed to converge."""


class InvalidThetaError(RegnormError):
    """An aggregator violates homogeneity, monotonicity or positivity."""


class StateError(RegnormError):
    """An operation was called before its required preprocessing step."""


class ConvergenceError(RegnormError):
    """An iterative solver exhausted its budget.

    Attributes
    ----------
    residual : float or None
        Last observed residual, when the solver tracks one.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class AbsolutizationCostError(RegnormError):
    """Sign-averaging over 2**K sign matrices was refused (K too large)."""


class ScaleError(RegnormError):
    """A brute-force oracle was asked for a problem size it cannot handle."""
