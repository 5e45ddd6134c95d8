"""Exception types shared across the package."""


class CascRankError(Exception):
    """Base class for all package errors."""


class ConfigError(CascRankError, ValueError):
    """Invalid parameters or run configuration."""


class ParseError(CascRankError, ValueError):
    """Malformed interaction input."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DenseCapError(CascRankError):
    """A dense (verification-only) path was asked to handle too many nodes."""
