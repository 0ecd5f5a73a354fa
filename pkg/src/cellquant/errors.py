"""Exception hierarchy shared by all engine modules.

The CLI maps these onto process exit codes, so the distinction between
"your file is malformed" (FormatError and friends), "your data violates a
documented invariant" (InvariantViolation) and "the OS said no" (plain
OSError) matters.
"""


class EngineError(Exception):
    """Base class for all errors raised by cellquant."""


class FormatError(EngineError):
    """A file does not conform to one of the documented on-disk formats."""


class CorruptedFileError(FormatError):
    """A file has a valid header but a truncated or inconsistent payload."""


class ValidationError(EngineError):
    """Input data is well-formed but fails a consistency check."""


class InvariantViolation(EngineError):
    """A documented runtime invariant does not hold (e.g. probabilities
    that do not sum to one)."""


class UndefinedMetricError(EngineError):
    """A metric has no defined value on the given sample (e.g. R-squared
    with zero variance in the ground-truth counts)."""
