"""Exception hierarchy shared across the package."""


class IwdError(Exception):
    """Base class for all package errors."""


class DomainError(IwdError, ValueError):
    """Input outside an operation's domain (empty DDM, bad noise level, ...)."""


class ShapeError(IwdError, ValueError):
    """Operands whose shapes are incompatible for the requested op."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class NumericalError(IwdError, ArithmeticError):
    """NaN or Inf produced where finite values are required."""


class ConfigError(IwdError, ValueError):
    """Bad or unknown configuration key/value."""


class DataError(IwdError, ValueError):
    """Malformed input file or record."""
