"""Exception hierarchy shared across the package."""


class TdganError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(TdganError, ValueError):
    pass


class ConfigError(TdganError, ValueError):
    pass


class DomainError(TdganError, ValueError):
    """An argument lies outside the domain of the operation (e.g. unknown label)."""


class NumericError(TdganError, ArithmeticError):
    pass


class StateError(TdganError, RuntimeError):
    pass


class ProtocolError(TdganError, RuntimeError):
    """A message exchange violated the generator/discriminator contract."""
