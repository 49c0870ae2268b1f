"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Input dimensions do not match what a model or dataset expects."""


class FormatError(ValueError):
    """A binary file has the wrong magic number or an unsupported layout."""


class LengthError(FormatError):
    """A binary file ended before the declared payload was read."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""
