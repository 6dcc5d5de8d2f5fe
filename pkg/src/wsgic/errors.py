"""Exception types shared across the package."""


class WsgicError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(WsgicError, ValueError):
    pass


class NonFiniteError(WsgicError, FloatingPointError):
    pass


class BadDimensionsError(WsgicError, ValueError):
    pass


class DegenerateMapError(WsgicError, ValueError):
    pass


class EmptyMaskError(WsgicError, ValueError):
    pass


class NoRecordsError(WsgicError, ValueError):
    pass


class EmptyCorpusError(WsgicError, ValueError):
    pass


class NoPositivesError(WsgicError, ValueError):
    pass


class UnknownTokenError(WsgicError, KeyError):
    pass


class LengthMismatchError(WsgicError, ValueError):
    pass


class InfeasiblePlacementError(WsgicError, RuntimeError):
    pass


class NonFiniteLossError(WsgicError, FloatingPointError):
    pass


class MissingCheckpointError(WsgicError, FileNotFoundError):
    pass


class CheckpointFormatError(WsgicError, ValueError):
    pass


class ConfigError(WsgicError, ValueError):
    pass
