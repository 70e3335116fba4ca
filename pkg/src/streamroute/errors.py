"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class SupportError(ValueError):
    """A distribution places mass where the reference has none."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class ValidationError(ValueError):
    """A config, manifest, or annotation failed validation (CLI exit code 2)."""
