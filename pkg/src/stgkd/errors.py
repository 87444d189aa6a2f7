"""Exception types shared across the package."""


class StructuralError(ValueError):
    """Inputs have incompatible shapes, sizes or ids."""


class NumericError(ArithmeticError):
    """A tensor contains NaN or infinite values."""
