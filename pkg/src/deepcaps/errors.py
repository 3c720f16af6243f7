"""Exception classes.

The CLI prints ``<ClassName>: <message>`` on failure, so names here are part
of the command-line contract.
"""


class DeepCapsError(Exception):
    """Base class for all package errors."""


class ShapeError(DeepCapsError, ValueError):
    pass


class NonFiniteError(DeepCapsError, ArithmeticError):
    pass


class NonFiniteLossError(NonFiniteError):
    pass


class ConfigError(DeepCapsError, ValueError):
    pass


class ArchitectureMismatchError(DeepCapsError, ValueError):
    pass


class DataFormatError(DeepCapsError, ValueError):
    pass


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class EmptyDatasetError(DeepCapsError, ValueError):
    pass


class CheckpointError(DeepCapsError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass
