"""Exception types shared across the package."""

__all__ = [
    "RBLODError",
    "InvalidArgumentError",
    "DegeneratePatchError",
    "CoercivityError",
    "SingularMatrixError",
    "ZeroReferenceError",
    "IllConditionedBasisError",
    "InconsistentDatabaseError",
    "DatabaseFormatError",
    "NonconvergenceError",
]


class RBLODError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(RBLODError, ValueError):
    """An argument is outside the documented domain of an operation."""


class DegeneratePatchError(RBLODError):
    """A patch has no interior fine node, so no corrector problem exists."""


class CoercivityError(RBLODError):
    """A coefficient field is not uniformly positive definite.

    Carries the offending sample point and parameter value when known.
    """

    def __init__(self, message, x=None, mu=None):
        super().__init__(message)
        self.x = x
        self.mu = mu


class SingularMatrixError(RBLODError):
    """A linear system factorization failed; carries pivot diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ZeroReferenceError(RBLODError, ZeroDivisionError):
    """A relative quantity was requested against a zero reference norm."""


class IllConditionedBasisError(RBLODError):
    """A reduced system produced non-finite coefficients."""


class InconsistentDatabaseError(RBLODError):
    """Stored offline data is missing pieces required by the request."""


class DatabaseFormatError(RBLODError):
    """A stored file does not match its manifest (size, shape, or header)."""


class NonconvergenceError(RBLODError):
    """An iteration hit its cap before meeting its tolerance.

    The iteration history is attached as ``trace``.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []
