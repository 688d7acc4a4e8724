"""Exception types shared across the library."""


class GradalignError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(GradalignError, ValueError):
    """Operands have incompatible shapes or lengths."""


class DegenerateInput(GradalignError, ValueError):
    """An input is outside the domain of the operation (e.g. a zero vector)."""


class ParameterError(GradalignError, ValueError):
    """A scalar parameter violates its constraint (e.g. tau <= 0)."""


class NumericalError(GradalignError, ArithmeticError):
    """A computation produced or would produce non-finite values."""


class InfiniteLoss(GradalignError, ArithmeticError):
    """A loss is infinite (zero probability on the support)."""


class ConfigError(GradalignError, ValueError):
    """An experiment or CLI configuration is invalid."""
