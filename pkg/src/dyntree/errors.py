"""Exception types shared across the package."""


class DynTreeError(Exception):
    """Base class for all package-specific errors."""


class InvalidMoveError(DynTreeError):
    """A grow/prune request violates the tree structure."""


class UndefinedPredictiveError(DynTreeError):
    """A leaf is below the size needed for a proper predictive density."""


class ConfigError(DynTreeError):
    """Invalid run configuration (CLI exit code 1)."""


class DataError(DynTreeError):
    """Malformed input data (CLI exit code 2)."""


class NumericalError(DynTreeError):
    """Unrecoverable numerical failure (CLI exit code 3)."""
