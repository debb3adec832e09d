"""Exception types shared across the package.

Each maps to a CLI exit code (see ``flowsynth.cli``).
"""


class FlowSynthError(Exception):
    exit_code = 1


class DataError(FlowSynthError, ValueError):
    """Bad input data: missing/malformed files, shape mismatches, degenerate samples."""

    exit_code = 3


class NumericError(FlowSynthError, FloatingPointError):
    """A computation produced non-finite values."""

    exit_code = 4


class ConfigError(FlowSynthError, ValueError):
    exit_code = 2


class UnknownKeyError(ConfigError):
    exit_code = 2


class ConfigTypeError(ConfigError, TypeError):
    exit_code = 5


class CheckpointError(DataError):
    """Checkpoint could not be trusted: digest, version or shape mismatch."""
