class PhysioLiteError(Exception):
    """Base class for all package errors."""


class DataError(PhysioLiteError, ValueError):
    """Malformed, truncated or inconsistent input data."""


class ConfigError(PhysioLiteError, ValueError):
    """Invalid configuration or arguments."""


class TrainingError(PhysioLiteError, RuntimeError):
    """Training diverged (non-finite loss)."""
