"""Exception hierarchy shared by every module."""


class TPRFError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(TPRFError, ValueError):
    """Input violates a documented precondition or invariant."""


class ParseError(ValidationError):
    """Malformed text input. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(TPRFError):
    """Binary file has the wrong magic number or version."""


class CorruptionError(TPRFError):
    """Binary file is truncated or carries trailing garbage."""


class ConfigError(TPRFError):
    """Invalid or incomplete pipeline/training configuration."""
