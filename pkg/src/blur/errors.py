"""Exception hierarchy shared by every module of the package."""


class BlurError(Exception):
    """Base class for all package errors."""


class DimensionError(BlurError, ValueError):
    """Operand shapes or widths do not agree."""


class NumericError(BlurError, FloatingPointError):
    """A non-finite value appeared where finite values are required."""


class ConfigError(BlurError, ValueError):
    """Invalid configuration or hyperparameter value."""


class ContractError(BlurError, RuntimeError):
    """An operation was called outside of its documented contract."""


class IngestionError(BlurError, ValueError):
    """Malformed input data (CSV rows, timestamps, values)."""


class CheckpointError(BlurError, OSError):
    """Checkpoint container could not be read or does not match the model."""
