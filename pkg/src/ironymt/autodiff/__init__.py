"""Minimal reverse-mode automatic differentiation over float64 numpy arrays."""

from .functional import (activation, constant, cross_entropy, dropout, elementwise, embedding,
                         layer_norm, linear)
from .gradcheck import check_gradients, finite_difference_gradient, relative_error
from .optim import AdamState, adam_step
from .rng import RngStream
from .tensor import (Tensor, add, backward, exp, gelu, getitem, hadamard, log, log_softmax,
                     matmul, mean, mul, relu, reshape, sigmoid, softmax, sub, tanh, transpose,
                     tsum)

__all__ = [
    "AdamState", "RngStream", "Tensor", "activation", "adam_step", "add", "backward", "check_gradients",
    "constant",
    "cross_entropy", "dropout", "elementwise", "embedding", "exp", "finite_difference_gradient",
    "gelu", "getitem", "hadamard", "layer_norm", "linear", "log", "log_softmax", "matmul", "mean",
    "mul", "relative_error", "relu", "reshape", "sigmoid", "softmax", "sub", "tanh", "transpose",
    "tsum",
]
