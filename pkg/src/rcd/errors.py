"""Exception types shared across the package."""


class RcdError(Exception):
    """Base class for all package errors."""


class DegenerateInputError(RcdError, ValueError):
    """Input carries no usable signal (too few elements, zero trace, ...)."""


class PreconditionError(RcdError, ValueError):
    """A documented call precondition was violated."""


class DivergenceError(RcdError, ArithmeticError):
    """An iteration or training run produced non-finite values."""


class SingularMatrixError(RcdError, ValueError):
    """Matrix too close to singular for the requested operation."""

    def __init__(self, message: str, eigenvalue: float):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class TapeError(RcdError, RuntimeError):
    """Gradient tape misuse: mixed tapes, missing intermediates."""


class ConfigError(RcdError, ValueError):
    """Bad configuration, shape mismatch, or malformed file."""


class GradientCheckError(RcdError, ArithmeticError):
    """Gradient check could not be evaluated (non-finite values)."""


class NumericError(RcdError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class UnderdeterminedError(RcdError, ValueError):
    """Operation has no unique answer (e.g. scaling a zero control vector)."""


class InfeasibleStepError(RcdError, ValueError):
    """Component step would leave the fixed-intensity ellipsoid.

    Carries the largest feasible step in the requested direction.
    """

    def __init__(self, message: str, max_feasible: float):
        super().__init__(message)
        self.max_feasible = max_feasible
