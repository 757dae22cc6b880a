"""Shared exception types.

ValueError is used for plain contract violations at function boundaries;
these two classes mark conditions the CLI maps to dedicated exit codes.
"""


class DataError(ValueError):
    """Malformed or inconsistent input data (files, tables, records)."""


class NumericError(RuntimeError):
    """Non-finite state encountered during training or sampling."""
