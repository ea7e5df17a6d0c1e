"""Minimal dense-tensor arithmetic with reverse-mode differentiation."""

from .checkpoint import load_mlp, save_mlp
from .mlp import Mlp, forward
from .optim import AdamState, adam_step
from .tensor import (Tape, Tensor, add, backward, clip, concat, div, exp, log,
                     logsumexp, matmul, mul, neg, reshape, sqrt, square,
                     stop_gradient, sub, take, tanh, tmean, transpose, tsum)

__all__ = [
    "AdamState", "Mlp", "Tape", "Tensor", "adam_step", "add", "backward",
    "clip", "concat", "div", "exp", "forward", "load_mlp", "log", "logsumexp",
    "matmul", "mul", "neg", "reshape", "save_mlp", "sqrt", "square",
    "stop_gradient", "sub", "take", "tanh", "tmean", "transpose", "tsum",
]
