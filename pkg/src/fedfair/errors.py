"""Exception types shared across the package.

The CLI maps each category to a distinct exit code (see cli.py).
"""


class FedfairError(Exception):
    """Base class for package errors."""


class ConfigError(FedfairError):
    """Bad experiment configuration (unknown key, bad value, bad file)."""


class DataError(FedfairError):
    """Dataset construction, parsing, or partitioning failure."""


class CheckpointError(FedfairError):
    """Model checkpoint missing, corrupt, or inconsistent."""


class NonFiniteError(FedfairError):
    """A numeric operation produced NaN or Inf where finiteness is required."""


class MetricUndefinedError(FedfairError):
    """A metric is undefined for the given inputs (e.g. CoV with zero mean)."""
