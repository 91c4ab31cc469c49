"""CLS/patch layer specialisation for Vision Transformers, in plain numpy."""

from .model import (
    KINDS,
    NORM_KINDS,
    ConfigError,
    ModelConfig,
    PathPair,
    SpecConfig,
    ViT,
    build_model,
    model_forward,
    vit_large,
)
from .tensor import Tensor, backward, grad_check
from .trace import PROBE_POINTS, ProbeTrace, TokenPartition

__version__ = "0.1.0"
