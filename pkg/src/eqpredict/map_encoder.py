"""Vectorized lane tokens, one transformer block, masked pooling, feature fusion.

Lane waypoints (already in the ego frame) become one token each in lane-major
order. Padding is carried as a boolean mask rather than zero tokens inside
attention: masked keys get exactly zero weight and masked tokens are forced
back to zero after every block, so padded lanes never influence the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .autodiff import tensor as T
from .autodiff.layers import Linear
from .autodiff.optim import ParameterStore
from .config import RunConfig

# Coordinates enter the network in units of this many meters.
LENGTH_SCALE = 10.0


@dataclass
class TokenSequence:
    tokens: T.Tensor  # [B, Q*L, d_model]
    mask: np.ndarray  # [B, Q*L] bool, True = valid


@dataclass
class FeatureBundle:
    """Per-agent inputs to the backbone.

    ``geometric`` holds ego-centered history coordinates (coordinate valued);
    ``invariant`` holds the speed profile followed by the map context.
    """

    geometric: np.ndarray  # [B, N, T_in, 2], meters
    invariant: T.Tensor  # [B, N, (T_in - 1) + d_ctx]
    mask: np.ndarray  # [B, N] bool


class _AttentionWeights:
    def __init__(self, store: ParameterStore, path: str, d_model: int, rng: np.random.Generator):
        self.w_q = store.create(f"{path}.w_q", (d_model, d_model), rng)
        self.w_k = store.create(f"{path}.w_k", (d_model, d_model), rng)
        self.w_v = store.create(f"{path}.w_v", (d_model, d_model), rng)
        self.w_o = store.create(f"{path}.w_o", (d_model, d_model), rng)


def multi_head_attention(
    x: T.Tensor, mask: np.ndarray, w: _AttentionWeights, n_heads: int
) -> Tuple[T.Tensor, T.Tensor]:
    """Scaled dot-product attention over valid keys; returns (mixed output, weights [B,h,n,n])."""
    b, n, d = x.shape
    if d % n_heads:
        raise ValueError(f"d_model={d} not divisible by n_heads={n_heads}")
    if not np.all(mask.any(axis=-1)):
        raise ValueError("empty map with attention requested")
    dk = d // n_heads

    def heads(t):
        return T.transpose(T.reshape(t, (b, n, n_heads, dk)), (0, 2, 1, 3))

    q, k, v = heads(x @ w.w_q), heads(x @ w.w_k), heads(x @ w.w_v)
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dk))
    weights = T.softmax(scores, axis=-1, mask=mask[:, None, None, :])
    attended = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, n, d))
    return attended @ w.w_o, weights


class MapEncoder:
    def __init__(self, store: ParameterStore, cfg: RunConfig, rng: np.random.Generator, path: str = "map"):
        cfg = cfg.resolved()
        self.kind = cfg.encoder
        self.n_heads = cfg.n_heads
        self.d_model, self.d_ctx = cfg.d_model, cfg.d_ctx
        self.embed = Linear(store, f"{path}.embed", 2, cfg.d_model, rng)
        if self.kind == "transformer":
            self.attn = _AttentionWeights(store, f"{path}.attn", cfg.d_model, rng)
            self.ln1_g = store.create(f"{path}.ln1.gamma", (cfg.d_model,), rng, init="ones")
            self.ln1_b = store.create(f"{path}.ln1.beta", (cfg.d_model,), rng, init="zeros")
            self.ffn1 = Linear(store, f"{path}.ffn.0", cfg.d_model, cfg.ffn_dim, rng)
            self.ffn2 = Linear(store, f"{path}.ffn.1", cfg.ffn_dim, cfg.d_model, rng)
            self.ln2_g = store.create(f"{path}.ln2.gamma", (cfg.d_model,), rng, init="ones")
            self.ln2_b = store.create(f"{path}.ln2.beta", (cfg.d_model,), rng, init="zeros")
        elif self.kind == "single_attention":
            self.attn = _AttentionWeights(store, f"{path}.attn", cfg.d_model, rng)
        else:
            raise ValueError(f"map encoder kind {self.kind!r} has no parameters")
        self.pool_w = store.create(f"{path}.pool.weight", (cfg.d_model, cfg.d_ctx), rng)

    def vectorize(self, ego_map: np.ndarray, valid: np.ndarray) -> TokenSequence:
        """[B, Q, L, 2] ego-frame waypoints -> lane-major tokens [B, Q*L, d_model]."""
        b, q, l, _ = ego_map.shape
        mask = valid.reshape(b, q * l)
        coords = np.where(mask[..., None], ego_map.reshape(b, q * l, 2), 0.0) / LENGTH_SCALE
        tokens = self.embed(T.Tensor(coords)) * mask[..., None].astype(np.float64)
        return TokenSequence(tokens, mask)

    def attention_block(self, seq: TokenSequence, layer_norm: bool = True, n_heads: Optional[int] = None) -> TokenSequence:
        mixed, _ = multi_head_attention(seq.tokens, seq.mask, self.attn, n_heads or self.n_heads)
        z = seq.tokens + mixed
        if layer_norm:
            z = T.layer_norm(z, self.ln1_g, self.ln1_b)
        return TokenSequence(z * seq.mask[..., None].astype(np.float64), seq.mask)

    def ffn_block(self, seq: TokenSequence) -> TokenSequence:
        z = seq.tokens
        y = T.layer_norm(z + self.ffn2(T.relu(self.ffn1(z))), self.ln2_g, self.ln2_b)
        return TokenSequence(y * seq.mask[..., None].astype(np.float64), seq.mask)

    def single_attention(self, seq: TokenSequence) -> TokenSequence:
        """One single-head pass with a residual add and no normalization."""
        return self.attention_block(seq, layer_norm=False, n_heads=1)

    def pool(self, seq: TokenSequence) -> T.Tensor:
        """Masked mean over valid tokens, then a bias-free projection to d_ctx."""
        m = seq.mask.astype(np.float64)
        count = np.maximum(m.sum(axis=1, keepdims=True), 1.0)
        mean = T.tsum(seq.tokens * m[..., None], axis=1) / count
        return mean @ self.pool_w

    def encode(self, seq: TokenSequence) -> TokenSequence:
        if self.kind == "transformer":
            return self.ffn_block(self.attention_block(seq))
        return self.single_attention(seq)

    def __call__(self, ego_map: np.ndarray, valid: np.ndarray) -> T.Tensor:
        """[B, Q, L, 2] ego-frame map -> [B, d_ctx] context; zero for scenes without a valid waypoint."""
        b = ego_map.shape[0]
        has = valid.reshape(b, -1).any(axis=1)
        if has.all():
            return self.pool(self.encode(self.vectorize(ego_map, valid)))
        if not has.any():
            return T.Tensor(np.zeros((b, self.d_ctx)))
        idx = np.flatnonzero(has)
        ctx = self.pool(self.encode(self.vectorize(ego_map[idx], valid[idx])))
        scatter = np.zeros((b, len(idx)))
        scatter[idx, np.arange(len(idx))] = 1.0
        return T.matmul(scatter, ctx)


def speed_profile(histories: np.ndarray, agent_mask: np.ndarray) -> np.ndarray:
    """Per-step displacement norms [B, N, T_in - 1]; zero for padded agents."""
    d = np.diff(histories, axis=2)
    return np.sqrt(np.sum(d * d, axis=-1)) * agent_mask[..., None]


def fuse_features(
    centered_histories: np.ndarray,
    agent_mask: np.ndarray,
    ctx: Optional[T.Tensor],
    d_ctx: int,
) -> FeatureBundle:
    """Build the backbone input: coordinates stay geometric, everything
    rigid-motion invariant goes into the per-agent invariant stream.

    ``ctx`` is ``[B, d_ctx]`` or ``None`` (no map), in which case zeros of the
    same width are used so parameter shapes do not depend on the map mode.
    """
    b, n = agent_mask.shape
    m = agent_mask.astype(np.float64)
    geometric = centered_histories * m[..., None, None]
    speeds = T.Tensor(speed_profile(centered_histories, agent_mask))
    if ctx is None:
        ctx_b = T.Tensor(np.zeros((b, n, d_ctx)))
    else:
        ctx_b = T.broadcast_to(T.reshape(ctx, (b, 1, d_ctx)), (b, n, d_ctx)) * m[..., None]
    return FeatureBundle(geometric, T.concat([speeds, ctx_b], axis=-1), agent_mask)
