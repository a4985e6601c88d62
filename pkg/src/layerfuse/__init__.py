"""Depth-wise layer fusion over a small numpy transformer encoder."""

from .config import ExperimentConfig, load_config
from .encoder import Encoder, EncoderConfig, LayerIntermediates, encode, freeze_base
from .errors import (ConfigError, ConllParseError, ContractError, InputError, ShapeError,
                     TrainingDiverged)
from .fusion import FusionKind, FusionSpec, build_head, count_added_params, dwatt_fuse
from .metrics import micro_f1, perplexity
from .model import FusionModel
from .tensor import Parameter, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ConllParseError", "ContractError", "Encoder", "EncoderConfig",
    "ExperimentConfig", "FusionKind", "FusionModel", "FusionSpec", "InputError",
    "LayerIntermediates", "Parameter", "ShapeError", "Tensor", "TrainingDiverged", "backward",
    "build_head", "count_added_params", "dwatt_fuse", "encode", "freeze_base", "load_config",
    "micro_f1", "no_grad", "perplexity",
]
