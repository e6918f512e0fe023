"""Exception types shared across the package.

Plain invalid arguments raise ``ValueError``; the classes below mark failure
modes that callers (mostly the CLI) need to tell apart.
"""


class ConfigError(ValueError):
    """A configuration key failed validation."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class ConfigDatasetConflict(ConfigError):
    """Dataset or checkpoint metadata disagrees with the active configuration."""


class DatasetTooLarge(MemoryError):
    """Requested dataset would exceed the configured memory budget."""


class NumericFailure(ArithmeticError):
    """Non-finite values appeared during training or an update step."""

    def __init__(self, message: str, round_index: int | None = None):
        if round_index is not None:
            message = f"round {round_index}: {message}"
        super().__init__(message)
        self.round_index = round_index


class DegenerateSignal(ValueError):
    """Noise level is undefined because the transmitted vector has zero energy."""


class UndefinedMetric(ValueError):
    """NMSE requested against a zero-energy ground truth."""
