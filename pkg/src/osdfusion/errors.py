"""Exception hierarchy shared across the toolkit.

Exit-code mapping used by the CLI: usage errors exit 1, DataError exits 2,
InfeasibleError exits 3.
"""


class OsdError(Exception):
    """Base class for all toolkit errors."""


class DataError(OsdError):
    """Malformed, inconsistent or missing input data.

    ``line_no`` is set when the error can be pinned to a line of an
    interchange file (1-based).
    """

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class InfeasibleError(OsdError):
    """A tuning constraint cannot be satisfied on the given data."""
