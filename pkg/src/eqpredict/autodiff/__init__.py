"""Minimal reverse-mode tensor library used by the model."""

import numpy as np

from .optim import AdamState, ParameterStore, adam_step
from .tensor import (
    Tensor,
    as_tensor,
    backward,
    concat,
    einsum,
    layer_norm,
    matmul,
    no_grad,
    relu,
    sigmoid,
    silu,
    smooth_norm,
    softmax,
)


def make_rng(seed: int):
    """Deterministic generator; identical seeds give identical streams."""
    return np.random.default_rng(seed)


__all__ = [
    "AdamState",
    "ParameterStore",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "concat",
    "einsum",
    "layer_norm",
    "make_rng",
    "matmul",
    "no_grad",
    "relu",
    "sigmoid",
    "silu",
    "smooth_norm",
    "softmax",
]
