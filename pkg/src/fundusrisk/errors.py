"""Shared exception types; the CLI maps them to exit codes."""


class ValidationError(ValueError):
    """Bad inputs, malformed files, or config violations. CLI exit code 1."""


class NumericError(RuntimeError):
    """Numeric failure: non-finite loss, undefined statistic, singular fit. CLI exit code 2."""


class UndefinedResultError(NumericError):
    """A statistic has no defined value on this input (e.g. no comparable pairs)."""
