"""Exception hierarchy shared by every signnet module."""

from __future__ import annotations


class SignNetError(Exception):
    """Base class for all errors raised by signnet."""


class ShapeError(SignNetError, ValueError):
    """Tensor shapes or dimensions are incompatible."""


class DTypeError(SignNetError, TypeError):
    """Operands carry different dtypes."""


class NumericError(SignNetError, ArithmeticError):
    """A NaN/Inf appeared, or an operation has no finite result."""


class ParameterError(SignNetError, ValueError):
    """A hyperparameter is outside its valid range."""


class ConfigError(SignNetError, ValueError):
    """A model or run configuration is invalid or inconsistent."""


class DataError(SignNetError, ValueError):
    """Dataset content (labels, records, splits) is invalid."""


class UsageError(SignNetError, RuntimeError):
    """An API was called in a state that does not support it."""


class StreamError(SignNetError, ValueError):
    """A streamed frame does not fit the stream configuration."""


class UndefinedMetricError(SignNetError, ValueError):
    """A metric is mathematically undefined for the given data."""


class FormatError(SignNetError, ValueError):
    """A binary file is malformed. ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int, path: str | None = None):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (at byte offset {offset})")
