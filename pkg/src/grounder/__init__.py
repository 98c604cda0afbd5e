"""Desk-scale visual grounding: two transformer branches, joint fusion with a
regression token, direct box regression, all on a small numpy tape engine."""

from .autograd import Tape, Tensor, backward, precision
from .boxes import Box, accuracy_at_iou, giou, iou
from .config import RunConfig, load_config, parse_config
from .errors import (ConfigError, ContractError, FormatError, GenerationError,
                     GrounderError, MaskError, ShapeError)
from .losses import LossConfig, grounding_loss, smooth_l1
from .model import GroundingModel, build_model
from .optim import AdamW, Schedule

__all__ = [
    "AdamW", "Box", "ConfigError", "ContractError", "FormatError",
    "GenerationError", "GrounderError", "GroundingModel", "LossConfig",
    "MaskError", "RunConfig", "Schedule", "ShapeError", "Tape", "Tensor",
    "accuracy_at_iou", "backward", "build_model", "giou", "grounding_loss",
    "iou", "load_config", "parse_config", "precision", "smooth_l1",
]

__version__ = "0.1.0"
