"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
InfeasibleBudgetError -> 3, NumericFailure -> 4.
"""


class DpfineError(Exception):
    """Base class for package errors."""


class ConfigError(DpfineError):
    """Invalid or inconsistent experiment configuration."""


class InfeasibleBudgetError(DpfineError):
    """Privacy target cannot be met within the calibration bracket."""


class NumericFailure(DpfineError):
    """Non-finite value encountered during computation."""


class ShapeError(DpfineError):
    """Tensor shape incompatible with a layer or operation."""
