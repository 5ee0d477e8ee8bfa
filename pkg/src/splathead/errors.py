"""Exception types shared across the package."""


class SplatHeadError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SplatHeadError, ValueError):
    """Raised when an argument violates a documented precondition."""


class BehindCameraError(InvalidInputError):
    """A point lies at or behind the near plane of a camera."""


class NumericalError(SplatHeadError, ArithmeticError):
    """An iterative solve failed or produced non-finite values."""

    def __init__(self, message, residual=None, step=None):
        super().__init__(message)
        self.residual = residual
        self.step = step
