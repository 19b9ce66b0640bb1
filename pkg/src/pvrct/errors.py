"""Exception types shared across the package."""


class PvrError(Exception):
    """Base class. ``field`` names the offending config/header field, if any."""

    field = "-"

    def __init__(self, message, field=None):
        super().__init__(message)
        if field is not None:
            self.field = field


class ConfigError(PvrError, ValueError):
    """Invalid configuration value; ``field`` is a dotted path."""

    def __init__(self, field, message):
        super().__init__(message, field=field)

    def __str__(self):
        return f"{self.field}: {self.args[0]}"


class VolumeFormatError(PvrError, ValueError):
    """Malformed volume container, mask or manifest."""


class InvariantError(PvrError, ValueError):
    """A value violates a data-type invariant (for example normalized > 1)."""


class CheckpointError(PvrError, ValueError):
    """Checkpoint names or shapes do not match the target model."""


class MissingClassError(PvrError, ValueError):
    """Balanced accuracy is undefined because a class has no samples."""


class NumericError(PvrError, ArithmeticError):
    """Non-finite loss or gradient during optimization."""
