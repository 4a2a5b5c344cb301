"""Exception types shared across the package."""


class VibeError(Exception):
    """Base error. ``code`` is a short machine-readable identifier."""

    code = "vibe_error"

    def __init__(self, message, code=None):
        super().__init__(message)
        if code is not None:
            self.code = code


class NumericsError(VibeError):
    code = "numerics"


class FormatError(VibeError):
    """Raised when an on-disk file is malformed."""

    code = "format"


class ConfigError(VibeError):
    code = "config"


class SolverError(VibeError):
    code = "solver"


class DataError(VibeError):
    code = "data"
