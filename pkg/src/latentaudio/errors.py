"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: DataError -> 2, NumericError -> 3.
Anything else that escapes is a bug, not a user error.
"""


class DataError(Exception):
    """Malformed or unusable input data (files, shapes, ranges)."""


class NumericError(Exception):
    """Non-finite values where finite ones are required (NaN aborts)."""
