"""Exception types shared across the toolkit.

Each class maps to one CLI exit code so scripted callers can tell a bad
config from a corrupt file from a numerical blow-up.
"""


class ToolkitError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigurationError(ToolkitError):
    """Invalid parameters, mismatched shapes, or incompatible layouts."""

    exit_code = 2


class FormatError(ToolkitError):
    """Corrupt, truncated, or out-of-range on-disk data."""

    exit_code = 3


class NumericalError(ToolkitError):
    """Non-finite values or a failed numerical consistency check."""

    exit_code = 4


class TrainingError(ToolkitError):
    """Optimization diverged."""

    exit_code = 5
