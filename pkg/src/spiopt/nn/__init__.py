from .functional import (
    ShapeError,
    add,
    add_bias,
    conv2d,
    conv_transpose2d,
    dense,
    max_pool2d,
    mse,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    sum_all,
)
from .params import ParameterSet, adam_step, conv_init, dense_init
from .tensor import GradientError, Tensor, backward, record

__all__ = [
    "GradientError",
    "ParameterSet",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "add_bias",
    "backward",
    "conv2d",
    "conv_init",
    "conv_transpose2d",
    "dense",
    "dense_init",
    "max_pool2d",
    "mse",
    "mul",
    "record",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "sum_all",
]
