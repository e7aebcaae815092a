from .core import (
    ConfigurationError,
    DualTensor,
    Graph,
    ShapeError,
    Tensor,
    TensorError,
    UnsupportedOpError,
    as_tensor,
    backward,
    grad_enabled,
    jvp,
    no_grad,
    stop_gradient,
)
from . import nn, ops
from .ops import conv1d, conv_transpose1d, multi_head_attention, snake

__all__ = [
    "ConfigurationError",
    "DualTensor",
    "Graph",
    "ShapeError",
    "Tensor",
    "TensorError",
    "UnsupportedOpError",
    "as_tensor",
    "backward",
    "conv1d",
    "conv_transpose1d",
    "grad_enabled",
    "jvp",
    "multi_head_attention",
    "nn",
    "no_grad",
    "ops",
    "snake",
    "stop_gradient",
]
