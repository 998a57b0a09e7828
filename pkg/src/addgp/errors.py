"""Exception and warning types raised across the package."""


class AddgpError(Exception):
    """Base class for all package errors."""


class NotSymmetric(AddgpError, ValueError):
    pass


class NotFactorizable(AddgpError, ValueError):
    pass


class InvalidDof(AddgpError, ValueError):
    pass


class DimensionMismatch(AddgpError, ValueError):
    pass


class InvalidReference(AddgpError, ValueError):
    pass


class InvalidSpec(AddgpError, ValueError):
    pass


class InvalidDimensions(AddgpError, ValueError):
    pass


class HessianNotPD(AddgpError, ValueError):
    pass


class MapFailed(AddgpError, RuntimeError):
    pass


class DegenerateResidualCovariance(AddgpError, ValueError):
    pass


class InsufficientDraws(AddgpError, ValueError):
    pass


class EmptyDraws(AddgpError, ValueError):
    pass


class GridMismatch(AddgpError, ValueError):
    pass


class ConfigError(AddgpError, ValueError):
    """Malformed or inconsistent configuration. ``field`` names the culprit."""

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class MaxIterationsExceeded(UserWarning):
    """MAP optimizer stopped before meeting the gradient tolerance."""


class BudgetExhausted(UserWarning):
    """Hyperparameter search ran out of evaluations before converging."""
