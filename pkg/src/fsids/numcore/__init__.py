"""Deterministic tensor arithmetic with reverse-mode autodiff."""

from .optim import Adam, AdamState, adam_step
from .rng import make_rng, stream
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    broadcast_to,
    concat,
    conv2d,
    exp,
    flatten,
    log,
    log_softmax,
    matmul,
    max_pool2x2,
    mul,
    neg,
    power,
    relu,
    reshape,
    set_debug_finite,
    sigmoid,
    softmax,
    softplus,
    take,
    tmean,
    tsum,
)

__all__ = [
    "Adam", "AdamState", "adam_step", "make_rng", "stream",
    "Tape", "Tensor", "add", "backward", "broadcast_to", "concat", "conv2d",
    "exp", "flatten", "log", "log_softmax", "matmul", "max_pool2x2", "mul",
    "neg", "power", "relu", "reshape", "set_debug_finite", "sigmoid",
    "softmax", "softplus", "take", "tmean", "tsum",
]
