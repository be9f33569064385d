"""Exception hierarchy shared across the package.

CLI exit codes map onto these classes: usage errors exit 1, data errors
exit 2, numerical failures exit 3.
"""


class TrackliftError(Exception):
    """Base class for all package-specific failures."""


class UsageError(TrackliftError):
    """Bad flag combinations or malformed configuration requests."""


class DataError(TrackliftError):
    """Malformed files, inconsistent tensors, or impossible data requests."""


class NumericalError(TrackliftError):
    """Non-finite values, degenerate geometry, or failed optimization."""
