"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes or ranks are incompatible."""


class ParameterError(ValueError):
    """A scalar argument is out of its valid range (eps <= 0, zero extent, ...)."""


class ConfigError(ValueError):
    """A configuration field is invalid or fields contradict each other."""


class ContractError(ValueError):
    """A call violates an operation precondition (non-scalar loss, empty sequence, ...)."""


class TapeStateError(RuntimeError):
    """The gradient tape is in the wrong state, e.g. backward on a consumed tape."""


class DataError(ValueError):
    """Dataset content is invalid (out-of-range label, degenerate split, ...)."""


class LoadError(IOError):
    """A serialized file is unreadable: bad magic, version, or truncated payload."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values where finite ones are required."""
