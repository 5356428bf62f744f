"""Exception hierarchy shared by every module."""


class SmoothInfError(Exception):
    """Base class for all package errors."""


class ConfigError(SmoothInfError, ValueError):
    """Invalid configuration: bad shapes, out-of-range hyperparameters, missing fields."""


class InputError(SmoothInfError, ValueError):
    """Invalid data handed to an otherwise valid operation (e.g. label out of range)."""


class NumericError(SmoothInfError, ArithmeticError):
    """A non-finite value appeared inside a computation."""


class ParseError(SmoothInfError, ValueError):
    """Malformed input file. ``location`` names the line or byte offset."""

    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)
