"""ViTAE and ViTAEv2 vision transformers on a small NumPy autodiff engine."""

from .config import ModelConfig, StageConfig, parse_config, preset, serialize_config
from .errors import (
    CheckpointError,
    ConfigError,
    DataFormatError,
    GradientError,
    NumericError,
    ShapeError,
    VitaeError,
)
from .model import ViTAE, build, count_flops, count_params, forward_classify
from .tensor import Tensor, backward, no_grad

__all__ = [
    "ModelConfig",
    "StageConfig",
    "parse_config",
    "preset",
    "serialize_config",
    "ViTAE",
    "build",
    "count_flops",
    "count_params",
    "forward_classify",
    "Tensor",
    "backward",
    "no_grad",
    "VitaeError",
    "ShapeError",
    "GradientError",
    "ConfigError",
    "NumericError",
    "DataFormatError",
    "CheckpointError",
]
