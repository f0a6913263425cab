class ValidationError(ValueError):
    """Bad input: wrong shapes, out-of-range settings, malformed config."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or failed to converge."""
