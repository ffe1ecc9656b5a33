"""Dense arrays with reverse-mode gradients for the transformer primitives."""
from . import backend, ops
from .core import Gradients, Tape, Tensor, as_array, default_dtype, set_default_dtype, tensor
from .ops import (
    add,
    concat,
    conv2d,
    depthwise_conv2d,
    gelu,
    getitem,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    mean,
    mul,
    permute,
    reshape,
    softmax,
    sub,
)
from .ops import sum as sum_  # noqa: F401

__all__ = [
    "Gradients", "Tape", "Tensor", "as_array", "backend", "default_dtype", "ops",
    "set_default_dtype", "tensor", "add", "concat", "conv2d", "depthwise_conv2d",
    "gelu", "getitem", "layer_norm", "linear", "log_softmax", "matmul", "mean",
    "mul", "permute", "reshape", "softmax", "sub",
]
