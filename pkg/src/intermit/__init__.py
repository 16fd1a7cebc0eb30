"""Latent-state forecasting for intermittent count time series."""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    DataError,
    FitError,
    IntermitError,
    ModeFindingError,
    NumericalError,
)

__all__ = [
    "ConfigurationError",
    "DataError",
    "FitError",
    "IntermitError",
    "ModeFindingError",
    "NumericalError",
    "__version__",
]
