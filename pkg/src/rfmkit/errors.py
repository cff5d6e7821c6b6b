"""Exception types shared across the package."""


class RFMError(Exception):
    """Base class for all package errors."""


class InvalidArgument(RFMError, ValueError):
    """Non-finite input, bad shape, or an out-of-range parameter."""


class DomainError(RFMError, ValueError):
    """Input outside the domain of a map (cut locus, t >= 1, ...)."""


class NumericFailure(RFMError, RuntimeError):
    """A numerical routine did not converge or lost reliability."""

    def __init__(self, message, residual=None, step=None):
        super().__init__(message)
        self.residual = residual
        self.step = step
