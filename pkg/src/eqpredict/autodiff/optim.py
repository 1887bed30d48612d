"""Named parameter storage and the Adam update."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, Optional, Tuple

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParameterStore:
    """Mapping from unique dotted paths to leaf tensors, plus Adam moments.

    Iteration is always in sorted path order so that initialization, updates
    and serialization are reproducible.
    """

    def __init__(self) -> None:
        self._params: Dict[str, Tensor] = {}
        self.adam: Dict[str, AdamState] = {}

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __len__(self) -> int:
        return len(self._params)

    def paths(self) -> list:
        return sorted(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        for path in self.paths():
            yield path, self._params[path]

    def add(self, path: str, values: np.ndarray) -> Tensor:
        if path in self._params:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self._params[path] = t
        return t

    def create(
        self,
        path: str,
        shape: Tuple[int, ...],
        rng: np.random.Generator,
        init: str = "uniform",
        fan_in: Optional[int] = None,
    ) -> Tensor:
        """Create a parameter. ``uniform`` draws from +-1/sqrt(fan_in); ``zeros``
        and ``ones`` are constant; ``identity`` needs a square 2-D shape."""
        if init == "uniform":
            fan = fan_in if fan_in is not None else shape[0]
            bound = 1.0 / math.sqrt(fan)
            values = rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            values = np.zeros(shape)
        elif init == "ones":
            values = np.ones(shape)
        elif init == "identity":
            values = np.eye(shape[0])
        else:
            raise ValueError(f"unknown init {init!r}")
        return self.add(path, values)

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def zero_grad(self, fill: bool = False) -> None:
        """Clear gradients; with ``fill`` set them to zero arrays instead, so
        parameters the loss does not reach still take a (null) Adam step."""
        for t in self._params.values():
            t.grad = np.zeros_like(t.data) if fill else None

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {p: t.data.copy() for p, t in self.items()}

    def map_data(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> None:
        for path, t in self.items():
            t.data = np.asarray(fn(path, t.data), dtype=np.float64)


def adam_step(
    store: ParameterStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update over all parameters, then clear gradients."""
    for path in store.paths():
        if store[path].grad is None:
            raise ValueError(f"missing gradient for parameter {path!r}")
    for path, param in store.items():
        g = param.grad
        state = store.adam.get(path)
        if state is None:
            state = store.adam[path] = AdamState(np.zeros_like(param.data), np.zeros_like(param.data))
        state.step += 1
        state.m = beta1 * state.m + (1.0 - beta1) * g
        state.v = beta2 * state.v + (1.0 - beta2) * (g * g)
        m_hat = state.m / (1.0 - beta1**state.step)
        v_hat = state.v / (1.0 - beta2**state.step)
        param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    store.zero_grad()
