"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A layer, block or model was configured with invalid arguments."""


class EvaluationError(ArithmeticError):
    """A function under test produced a non-finite value."""


class AlignmentError(ValueError):
    """Student and teacher token grids do not line up."""


class FitError(ValueError):
    """Not enough distinct points to fit a power law."""
