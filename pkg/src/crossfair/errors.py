"""Error taxonomy shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1, data
problems exit 2, numerical failures exit 3.
"""


class CrossfairError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class UsageError(CrossfairError):
    """Bad command line, bad config key, or inconsistent options."""

    exit_code = 1


class DataError(CrossfairError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class NumericalError(CrossfairError):
    """NaN/inf encountered, or a degenerate quantity that has no defined value."""

    exit_code = 3
