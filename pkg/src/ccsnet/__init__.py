"""Convex-concave spline (CCS) approximation of feedforward networks."""

from ccsnet.errors import FormatError, LengthError, NumericError, ShapeError

__version__ = "0.1.0"

__all__ = ["FormatError", "LengthError", "NumericError", "ShapeError", "__version__"]
