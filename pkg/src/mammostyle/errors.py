"""Exception types shared across the package."""


class MammostyleError(Exception):
    """Base class for all package errors."""


class ImageFormatError(MammostyleError):
    """Unreadable, unsupported, or malformed image file."""


class DegenerateImageError(MammostyleError):
    """Image content unusable (zero variance, no foreground, ...)."""


class ConfigError(MammostyleError):
    """Invalid configuration file or option set."""


class DivergenceError(MammostyleError):
    """Optimization produced a non-finite loss. Carries the trace so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class ScorerError(MammostyleError):
    """External quality scorer failed or is misconfigured."""
