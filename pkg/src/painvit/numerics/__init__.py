"""Minimal float64 tensor engine with reverse-mode differentiation."""

from .gradcheck import check_gradients, numerical_gradient, relative_error
from .nnops import RunningStats, batch_norm, conv2d, depthwise_conv2d, dropout
from .tensor import (
    Tensor,
    no_grad,
    add,
    as_tensor,
    concat,
    exp,
    getitem,
    linear,
    log,
    log_softmax,
    matmul,
    mul,
    power,
    relu,
    reshape,
    softmax,
    tensor_mean,
    tensor_sum,
    transpose,
)

__all__ = [
    "RunningStats",
    "Tensor",
    "add",
    "as_tensor",
    "batch_norm",
    "check_gradients",
    "concat",
    "conv2d",
    "depthwise_conv2d",
    "dropout",
    "exp",
    "getitem",
    "linear",
    "log",
    "log_softmax",
    "matmul",
    "mul",
    "no_grad",
    "numerical_gradient",
    "power",
    "relative_error",
    "relu",
    "reshape",
    "softmax",
    "tensor_mean",
    "tensor_sum",
    "transpose",
]
