"""Exception types shared across the package."""


class LayoutDiffusionError(Exception):
    """Base class for errors raised by this package."""


class DataError(LayoutDiffusionError):
    """Invalid dataset, layout, or condition input."""


class NumericError(LayoutDiffusionError):
    """Numerical failure: non-finite values, bad gradients, shape errors."""


class NotFittedError(LayoutDiffusionError):
    """Estimator method called before ``fit``."""
