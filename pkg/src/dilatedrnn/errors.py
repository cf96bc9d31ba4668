"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes do not line up."""


class ConfigurationError(ValueError):
    """An architecture, schedule, or run configuration is invalid."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class FormatError(ValueError):
    """A binary or text file does not follow its declared layout.

    ``offset`` is the byte (or line) position at which parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConsistencyError(RuntimeError):
    """Cached forward state does not match the backward request."""
