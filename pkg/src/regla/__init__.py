"""ReLU-gated linear attention networks in plain numpy, with verification tooling."""

from .attention import GateVariant, relu_linear_attention, rgma_forward, softmax_attention
from .model import VARIANTS, Model, ModelConfig, build, count_params, forward

__all__ = [
    "GateVariant",
    "Model",
    "ModelConfig",
    "VARIANTS",
    "build",
    "count_params",
    "forward",
    "relu_linear_attention",
    "rgma_forward",
    "softmax_attention",
]
__version__ = "0.1.0"
