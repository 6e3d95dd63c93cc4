"""Exception taxonomy shared by every stage of the pipeline.

Each class carries the process exit code the CLI maps it to, so library
errors and command-line behaviour can never drift apart.
"""


class MoodError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(MoodError):
    """Bad parameters, unusable configuration, or misuse of an operation."""

    exit_code = 2


class DataError(MoodError):
    """Input data that violates a precondition (empty sets, bad labels, ...)."""

    exit_code = 3


class ValidationError(DataError):
    """A container invariant does not hold (non-finite values, bad shapes)."""


class FormatError(DataError):
    """A file does not conform to its on-disk format."""


class ShapeError(DataError):
    """Geometry or dimension mismatch between two pipeline objects."""


class NumericError(MoodError):
    """Non-finite values or divergence encountered during computation."""

    exit_code = 4
