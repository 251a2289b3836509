"""Shared exception types."""


class ShapeError(ValueError):
    """Tensor dimensions incompatible with an operation."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataFormatError(ValueError):
    """Malformed dataset file; carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


class MissingGradientError(ValueError):
    """A trainable parameter received no gradient."""
