"""Exception hierarchy shared by every module.

Validation problems map to CLI exit code 2, numerical failures to 3.
"""


class RibulkError(Exception):
    """Base class."""


class ValidationError(RibulkError, ValueError):
    """Inputs violate a documented precondition."""


class NumericalError(RibulkError, RuntimeError):
    """A solver, quadrature or sampler failed to reach its tolerance."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class ExtentError(ValidationError):
    """Requested offset lies outside the Green table."""


class GaugeError(NumericalError):
    """Neumann series for an exponential moment does not converge."""
