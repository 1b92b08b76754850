"""Tensor arithmetic, reverse-mode gradients, Adam, and small linear algebra."""
from .rng import Rng, mix64
from .tensor import (
    Tensor, NonFiniteError, no_grad, grad_enabled, backward,
    add, sub, mul, div, neg, matmul, reshape, transpose,
    tsum, tmean, mean_square, softmax, layer_norm, silu, relu,
    exp, log, sqrt, embedding, conv2d, avg_pool2d, linear,
)
from .optim import Adam, AdamState, adam_step
from .linalg import svd, sqrtm_psd, gaussian_fit

__all__ = [
    "Rng", "mix64",
    "Tensor", "NonFiniteError", "no_grad", "grad_enabled", "backward",
    "add", "sub", "mul", "div", "neg", "matmul", "reshape", "transpose",
    "tsum", "tmean", "mean_square", "softmax", "layer_norm", "silu", "relu",
    "exp", "log", "sqrt", "embedding", "conv2d", "avg_pool2d", "linear",
    "Adam", "AdamState", "adam_step",
    "svd", "sqrtm_psd", "gaussian_fit",
]
