"""Exception hierarchy shared by all feddeap modules."""


class FedDeapError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(FedDeapError, ValueError):
    pass


class DataError(FedDeapError, ValueError):
    pass


class ZeroNorm(FedDeapError, ArithmeticError):
    pass


class IndexOutOfRange(FedDeapError, IndexError):
    pass


class DimensionMismatch(FedDeapError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class DimensionTooSmall(FedDeapError, ValueError):
    pass


class DisconnectedParameter(FedDeapError, RuntimeError):
    pass


class NonFiniteValue(FedDeapError, FloatingPointError):
    pass


class EmptyBatch(FedDeapError, ValueError):
    pass


class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class EmptyClass(DataError):
    pass


class DegenerateDraw(DataError):
    pass


class EmptyUpdateSet(FedDeapError, ValueError):
    pass


class MissingClient(FedDeapError, RuntimeError):
    pass
