"""Small building blocks over :class:`ParameterStore`."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .optim import ParameterStore

ACTIVATIONS: dict = {"relu": T.relu, "silu": T.silu}


class Linear:
    def __init__(
        self,
        store: ParameterStore,
        path: str,
        n_in: int,
        n_out: int,
        rng: np.random.Generator,
        bias: bool = True,
    ):
        self.weight = store.create(f"{path}.weight", (n_in, n_out), rng)
        self.bias = store.create(f"{path}.bias", (n_out,), rng, init="zeros") if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class MLP:
    """Linear layers with an activation between them (none after the last)."""

    def __init__(
        self,
        store: ParameterStore,
        path: str,
        sizes: Sequence[int],
        rng: np.random.Generator,
        activation: str = "silu",
    ):
        self.layers = [
            Linear(store, f"{path}.{i}", sizes[i], sizes[i + 1], rng) for i in range(len(sizes) - 1)
        ]
        self.act: Callable = ACTIVATIONS[activation]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.act(x)
        return x
