"""Drone RF identification and OOD detection by fusing ZC correlation and TFI features."""

from .errors import (ConfigurationError, DataError, DiagnosticError, DroneFuseError, InvariantError,
                     ParameterError)

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "DataError", "DiagnosticError", "DroneFuseError", "InvariantError",
           "ParameterError", "__version__"]
