"""Regime detection for panels of count time series."""

from ._stats import NumericalError

__version__ = "0.1.0"

__all__ = ["NumericalError", "__version__"]
