"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, DataError exits 2,
NumericalError exits 3.
"""


class JezslError(Exception):
    """Base class for package-specific failures."""


class DataError(JezslError):
    """Malformed file, bad magic, truncated payload, or split violation."""


class NumericalError(JezslError):
    """Non-finite value, degenerate norm, or singular gradient."""
