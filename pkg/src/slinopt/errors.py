"""Exception types shared across the package."""


class SlinoptError(Exception):
    """Base class for all package errors."""


class ValidationError(SlinoptError):
    """Bad shapes, units, parameter values, or config documents."""


class NumericalError(SlinoptError):
    """Factorization failure, NaN/overflow, or integrator blow-up."""

    def __init__(self, message, t=None, where=None):
        self.t = t
        self.where = where
        if t is not None:
            message = f"{message} (t={t:.6g})"
        if where:
            message = f"{message} [{where}]"
        super().__init__(message)


class ConvergenceError(SlinoptError):
    """An optimization run ended without meeting its tolerances."""
