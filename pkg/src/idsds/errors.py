"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or arguments (CLI exit code 2)."""


class ShapeError(ValueError):
    """Operands with non-conformable shapes."""


class NumericFault(ArithmeticError):
    """A computation produced NaN or Inf (CLI exit code 3)."""


class FormatError(ValueError):
    """A binary file does not follow its declared layout."""
