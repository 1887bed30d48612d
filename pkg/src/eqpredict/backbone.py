"""Equivariant geometric / pattern feature learning.

Geometric features ``G`` have shape ``[B, N, C, 2]``: C coordinate-valued
channels per agent. They are only ever combined linearly across channels
(the same weights act on x and y), added, or scaled by invariant scalars, so
rotating the scene rotates every channel. Pattern features ``H`` of shape
``[B, N, hidden]`` see ``G`` only through norms and pairwise distances and are
therefore unchanged by rigid motions. Translation is removed upstream by
centering on the ego's current position.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .autodiff import tensor as T
from .autodiff.layers import MLP
from .autodiff.optim import ParameterStore
from .config import RunConfig
from .map_encoder import LENGTH_SCALE, FeatureBundle


def pair_mask(agent_mask: np.ndarray) -> np.ndarray:
    """[B, N, N] float: 1 for ordered pairs of distinct valid agents."""
    m = agent_mask.astype(np.float64)
    n = agent_mask.shape[-1]
    return m[:, :, None] * m[:, None, :] * (1.0 - np.eye(n))


def _pairwise(h: T.Tensor) -> Tuple[T.Tensor, T.Tensor]:
    """Broadcast [B, N, F] to (h_i, h_j), each [B, N, N, F]."""
    b, n, f = h.shape
    hi = T.broadcast_to(T.reshape(h, (b, n, 1, f)), (b, n, n, f))
    hj = T.broadcast_to(T.reshape(h, (b, 1, n, f)), (b, n, n, f))
    return hi, hj


def _differences(g: T.Tensor) -> T.Tensor:
    """G_i - G_j, [B, N, N, C, 2]."""
    b, n, c, _ = g.shape
    return T.reshape(g, (b, n, 1, c, 2)) - T.reshape(g, (b, 1, n, c, 2))


@dataclass
class _Repeat:
    w_self: T.Tensor
    w_cat: T.Tensor  # [K, C, C]
    phi: MLP
    gate: MLP
    message: MLP
    update: MLP


class EquivariantBackbone:
    def __init__(self, store: ParameterStore, cfg: RunConfig, rng: np.random.Generator, path: str = "backbone"):
        cfg = cfg.resolved()
        c, hid, k = cfg.channels, cfg.hidden_dim, cfg.n_categories
        self.channels, self.hidden, self.categories = c, hid, k
        n_inv = (cfg.t_in - 1) + cfg.d_ctx
        self.w_init = store.create(f"{path}.init.geometric", (cfg.t_in, c), rng)
        self.h_init = MLP(store, f"{path}.init.pattern", [n_inv, hid, hid], rng)
        self.edge = MLP(store, f"{path}.edges", [c + 2 * hid, hid, k], rng)
        self.repeats = []
        for p in range(cfg.repeats):
            pre = f"{path}.repeat{p:02d}"
            self.repeats.append(
                _Repeat(
                    w_self=store.create(f"{pre}.geo.w_self", (c, c), rng, init="identity"),
                    w_cat=store.create(f"{pre}.geo.w_cat", (k, c, c), rng, fan_in=c),
                    phi=MLP(store, f"{pre}.geo.phi", [2 * hid, hid, k], rng),
                    gate=MLP(store, f"{pre}.geo.gate", [c + hid, hid, c], rng),
                    message=MLP(store, f"{pre}.pat.message", [hid + c, hid, hid], rng),
                    update=MLP(store, f"{pre}.pat.update", [2 * hid + c, hid, hid], rng),
                )
            )

    def init_features(self, bundle: FeatureBundle) -> Tuple[T.Tensor, T.Tensor]:
        """G0: bias-free linear combinations of history points; H0: MLP of the invariant stream."""
        m = bundle.mask.astype(np.float64)
        x = bundle.geometric / LENGTH_SCALE
        g0 = T.einsum("bntx,tc->bncx", x, self.w_init) * m[:, :, None, None]
        h0 = self.h_init(bundle.invariant) * m[:, :, None]
        return g0, h0

    def infer_edges(self, g: T.Tensor, h: T.Tensor, agent_mask: np.ndarray) -> T.Tensor:
        """Soft interaction categories e[b, i, j, :] from invariant pair descriptors."""
        dist = T.smooth_norm(_differences(g), axis=-1)
        hi, hj = _pairwise(h)
        logits = self.edge(T.concat([dist, hi, hj], axis=-1))
        return T.softmax(logits, axis=-1) * pair_mask(agent_mask)[..., None]

    def geometric_layer(self, rep: _Repeat, g: T.Tensor, h: T.Tensor, e: T.Tensor, agent_mask: np.ndarray) -> T.Tensor:
        m = agent_mask.astype(np.float64)
        hi, hj = _pairwise(h)
        coef = e * rep.phi(T.concat([hi, hj], axis=-1))  # [B, N, N, K]
        per_cat = T.einsum("bijk,bijcx->bikcx", coef, _differences(g))
        update = T.einsum("bncx,cd->bndx", g, rep.w_self) + T.einsum("bikcx,kcd->bidx", per_cat, rep.w_cat)
        gate_in = T.concat([T.smooth_norm(update, axis=-1), h], axis=-1)
        gate = 2.0 * T.sigmoid(rep.gate(gate_in))  # exactly 1 when the gate MLP outputs 0
        return update * T.reshape(gate * m[:, :, None], gate.shape + (1,))

    def pattern_layer(self, rep: _Repeat, g: T.Tensor, h: T.Tensor, agent_mask: np.ndarray) -> T.Tensor:
        m = agent_mask.astype(np.float64)
        pm = pair_mask(agent_mask)
        dist = T.smooth_norm(_differences(g), axis=-1)  # [B, N, N, C]
        _, hj = _pairwise(h)
        msg = rep.message(T.concat([hj, dist], axis=-1)) * pm[..., None]
        count = np.maximum(pm.sum(axis=2), 1.0)[..., None]
        neighbor_mean = T.tsum(msg, axis=2) / count
        upd = rep.update(T.concat([h, T.smooth_norm(g, axis=-1), neighbor_mean], axis=-1))
        return (h + upd) * m[:, :, None]

    def __call__(self, bundle: FeatureBundle) -> Tuple[T.Tensor, T.Tensor]:
        g, h = self.init_features(bundle)
        e = self.infer_edges(g, h, bundle.mask)
        for rep in self.repeats:
            g, h = self.geometric_layer(rep, g, h, e, bundle.mask), self.pattern_layer(rep, g, h, bundle.mask)
        return g, h
