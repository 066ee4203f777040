"""Exception types raised across the package."""


class AnyShotError(Exception):
    """Base class for all package errors."""


class ZeroNormError(AnyShotError, ValueError):
    pass


class DimensionError(AnyShotError, ValueError):
    pass


class MissingEmbedding(AnyShotError, KeyError):
    pass


class DomainError(AnyShotError, ValueError):
    pass


class NumericalError(AnyShotError, FloatingPointError):
    pass


class EmptyInput(AnyShotError, ValueError):
    pass


class ConfigError(AnyShotError, ValueError):
    pass


class TrainingDiverged(AnyShotError, RuntimeError):
    pass


class ModeMismatch(AnyShotError, ValueError):
    pass
