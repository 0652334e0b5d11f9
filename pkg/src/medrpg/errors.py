"""Exception hierarchy.

Each family maps onto one CLI exit code (see :mod:`medrpg.cli`).
"""


class MedRPGError(Exception):
    exit_code = 4


class ConfigError(MedRPGError, ValueError):
    """Invalid or incompatible configuration."""

    exit_code = 2


class DataError(MedRPGError):
    """Problems with input data or annotation files."""

    exit_code = 3


class MissingFieldError(DataError):
    pass


class BoxOutOfFrameError(DataError):
    pass


class ImageReadError(DataError):
    pass


class DuplicateIdError(DataError):
    pass


class GenerationError(DataError):
    """The synthetic generator cannot satisfy its uniqueness constraints."""


class ShapeError(MedRPGError, ValueError):
    """Tensor shape does not match the model configuration."""


class InputError(MedRPGError, ValueError):
    """Bad model input (empty phrase, out-of-vocabulary id, ...)."""


class DegenerateBoxError(MedRPGError, ValueError):
    pass


class SamplingInfeasibleError(MedRPGError, RuntimeError):
    pass


class NumericError(MedRPGError, RuntimeError):
    """Non-finite loss encountered during training."""
