"""Phrase grounding with a [REG]-token vision-language transformer and tri-attention contrastive alignment."""

from .errors import ConfigError, DataError, MedRPGError, NumericError
from .geometry import BoundingBox, Convention, Frame, NORMALIZED, convert, giou, iou

__version__ = "0.1.0"

__all__ = ["BoundingBox", "Convention", "Frame", "NORMALIZED", "convert", "iou", "giou", "MedRPGError", "ConfigError",
           "DataError", "NumericError", "__version__"]
