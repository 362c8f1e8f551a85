"""Exception hierarchy for the toolkit.

Every error carries the exit code the CLI reports for it.
"""

from typing import Optional


class ZslError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigurationError(ZslError, ValueError):
    """Invalid hyperparameters, config keys or experiment settings."""

    exit_code = 2


class DimensionError(ConfigurationError):
    """Zero dimensions or mismatched shapes."""


class DomainError(ConfigurationError):
    """Arguments outside the domain of a closed-form formula."""


class DataError(ZslError, ValueError):
    """Malformed or unusable data."""

    exit_code = 3


class InsufficientDataError(DataError):
    """Too few samples, rows, classes or trials for the requested statistic."""


class DegenerateError(DataError):
    """Zero-norm rows, constant vectors and similar degenerate inputs."""

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class LabelError(DataError):
    """Labels outside the valid class range."""


class ParseError(DataError):
    """A file could not be parsed."""

    def __init__(self, message: str, line: Optional[int] = None, offset: Optional[int] = None):
        super().__init__(message)
        self.line = line
        self.offset = offset


class UndefinedMetricError(DataError):
    """A metric is undefined for the given sequence length."""


class StateError(ZslError, RuntimeError):
    """Operations invoked in the wrong object state (stale caches, detached probes)."""

    exit_code = 1
