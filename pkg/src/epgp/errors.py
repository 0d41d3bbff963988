"""Exception hierarchy shared across the package."""


class EpgpError(Exception):
    """Base class for all errors raised by this package."""


class InputError(EpgpError, ValueError):
    """Invalid user-supplied arguments (shape mismatch, bad flag values)."""


class NumericalError(EpgpError):
    """A required factorization or integral could not be computed."""


class CavityError(NumericalError):
    """Cavity distribution has non-positive-definite covariance."""


class QuadratureError(NumericalError):
    """Tilted-moment quadrature underflowed or produced non-finite values."""


class InitializationError(NumericalError):
    """Sampler could not evaluate the target at its starting point."""


class OptimizationError(EpgpError):
    """Every hyperparameter-search start failed."""


class FormatError(EpgpError):
    """Malformed data file (unparseable value, wrong field count)."""


class SchemaError(EpgpError):
    """Data file does not contain the requested columns."""
