"""Exception types shared across the package."""


class IntermitError(Exception):
    """Base class for all package errors."""


class ConfigurationError(IntermitError):
    """Invalid model structure or run configuration."""


class DataError(IntermitError):
    """Malformed or inconsistent input data."""


class NumericalError(IntermitError):
    """Non-finite values or singular systems during inference."""


class ModeFindingError(NumericalError):
    """Inner Newton optimization failed in a way that cannot be recovered."""


class FitError(IntermitError):
    """Outer optimization aborted after repeated inner failures."""
