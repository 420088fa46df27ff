"""Exception hierarchy shared across the package.

DataError maps to CLI exit code 2, NumericalError to exit code 3.
"""


class XimputeError(Exception):
    """Base class for errors raised by this package."""


class DataError(XimputeError):
    """Invalid, inconsistent, or insufficient input data."""


class EmptyCrossSectionError(DataError):
    """No stock qualifies for the requested cross-section."""


class NumericalError(XimputeError):
    """A numerical routine failed beyond repair (singular blocks, divergence)."""


class DegenerateSortError(NumericalError):
    """All forecasts are equal; a decile sort is meaningless for this month."""
