"""Exception types shared across the package.

The CLI maps these onto exit codes: ``ConfigError`` -> 1,
``DataError`` -> 2, ``DivergenceError`` -> 3.
"""


class CoqmemError(Exception):
    """Base class for all package errors."""


class ConfigError(CoqmemError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(CoqmemError, ValueError):
    """Malformed input data or file."""


class FormatError(DataError):
    """A binary file does not match its declared layout."""


class DivergenceError(CoqmemError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
