"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: parameter/configuration problems are
user errors (1), data problems are data errors (2), and anything raised as
an :class:`InvariantError` is an internal failure (3).
"""


class DroneFuseError(Exception):
    """Base class for all package errors."""


class ParameterError(DroneFuseError, ValueError):
    """An argument is outside the operation's precondition."""


class ConfigurationError(DroneFuseError, ValueError):
    """A model or run configuration is inconsistent."""


class DiagnosticError(DroneFuseError, RuntimeError):
    """An operation cannot produce a meaningful result for this input."""


class DataError(DroneFuseError, IOError):
    """A file on disk is malformed or unreadable."""


class InvariantError(DroneFuseError, AssertionError):
    """An internal invariant was violated."""
