"""Trajectory decoding, ADE loss, ADE/FDE metrics, the constant-velocity
baseline, and the full scene -> trajectory model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import geometry
from .autodiff import tensor as T
from .autodiff.layers import Linear
from .autodiff.optim import ParameterStore
from .backbone import EquivariantBackbone
from .config import RunConfig
from .map_encoder import LENGTH_SCALE, MapEncoder, fuse_features
from .scene_data import Scene, SceneBatch, collate, fmt

DEFAULT_HORIZONS = (1.0, 2.0, 3.0)


# -- metrics ------------------------------------------------------------------
def displacement_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"trajectory length mismatch: {pred.shape} vs {truth.shape}")
    d = pred - truth
    return np.sqrt(np.sum(d * d, axis=-1))


def horizon_steps(horizon_s: float, rate_hz: int) -> int:
    steps = horizon_s * rate_hz
    if abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
        raise ValueError(f"horizon {horizon_s}s is not a whole number of steps at {rate_hz} Hz")
    return int(round(steps))


def computable_horizons(t_out: int, rate_hz: int = 10, horizons: Sequence[float] = DEFAULT_HORIZONS) -> List[float]:
    return [h for h in horizons if horizon_steps(h, rate_hz) <= t_out]


def horizon_label(horizon_s: float) -> str:
    return f"{horizon_s:g}s"


def metrics(
    pred: np.ndarray,
    truth: np.ndarray,
    rate_hz: int = 10,
    horizons: Sequence[float] = DEFAULT_HORIZONS,
) -> Tuple[Dict[float, float], Dict[float, float]]:
    """ADE over steps 1..h*rate and FDE at step h*rate exactly, per horizon (seconds)."""
    errors = displacement_errors(pred, truth)
    n = errors.shape[-1]
    too_long = [h for h in horizons if horizon_steps(h, rate_hz) > n]
    if too_long:
        ok = computable_horizons(n, rate_hz, horizons)
        raise ValueError(
            f"trajectory of {n} steps cannot cover horizons {too_long}; computable: {ok}"
        )
    ade, fde = {}, {}
    for h in horizons:
        k = horizon_steps(h, rate_hz)
        ade[h] = float(np.mean(errors[..., :k]))
        fde[h] = float(np.mean(errors[..., k - 1]))
    return ade, fde


def ade_loss(pred: T.Tensor, truth: np.ndarray) -> T.Tensor:
    """Mean over steps (and batch) of the smoothed Euclidean error sqrt(d^2 + 1e-12)."""
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"trajectory length mismatch: {pred.shape} vs {truth.shape}")
    return T.mean(T.smooth_norm(pred - truth, axis=-1))


def constant_velocity_baseline(history: np.ndarray, t_out: int) -> np.ndarray:
    """Extrapolate the last displacement for ``t_out`` steps; works on [..., T_in, 2]."""
    history = np.asarray(history, dtype=np.float64)
    if history.shape[-2] < 2:
        raise ValueError("constant-velocity baseline needs at least two history points")
    last = history[..., -1:, :]
    v = history[..., -1:, :] - history[..., -2:-1, :]
    k = np.arange(1, t_out + 1, dtype=np.float64)[:, None]
    return last + k * v


@dataclass
class PredictionReport:
    scene_id: str
    predicted: np.ndarray  # [T_out, 2]
    ade: Dict[float, float] = field(default_factory=dict)
    fde: Dict[float, float] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def to_record(self) -> str:
        """``scene_id, x0, y0, ..., ADE per horizon, FDE per horizon`` at 9 significant digits."""
        values = [fmt(v) for v in self.predicted.ravel()]
        values += [fmt(self.ade[h]) for h in sorted(self.ade)]
        values += [fmt(self.fde[h]) for h in sorted(self.fde)]
        return ",".join([self.scene_id] + values)

    @staticmethod
    def record_header(t_out: int, horizons: Sequence[float]) -> str:
        cols = ["scene_id"] + [f"{a}{t}" for t in range(t_out) for a in ("x", "y")]
        cols += [f"ade_{horizon_label(h)}" for h in sorted(horizons)]
        cols += [f"fde_{horizon_label(h)}" for h in sorted(horizons)]
        return ",".join(cols)


# -- decoder --------------------------------------------------------------------
class EquivariantDecoder:
    """pred = MLP(G - mean(G)) + mean(G), with an MLP built from channel mixing
    and norm gates so that it commutes with rotations."""

    def __init__(self, store: ParameterStore, cfg: RunConfig, rng: np.random.Generator, path: str = "decoder"):
        cfg = cfg.resolved()
        c = cfg.channels
        self.mix = []
        self.gates = []
        for i in range(cfg.mlp_layers - 1):
            self.mix.append(store.create(f"{path}.layer{i}.mix", (c, c), rng))
            self.gates.append(Linear(store, f"{path}.layer{i}.gate", c, c, rng))
        self.readout = store.create(f"{path}.layer{cfg.mlp_layers - 1}.mix", (c, cfg.t_out), rng)

    def __call__(self, g_ego: T.Tensor) -> T.Tensor:
        """[B, C, 2] ego geometric channels -> [B, T_out, 2] (same units, relative to the ego)."""
        centroid = T.mean(g_ego, axis=1, keepdims=True)  # [B, 1, 2]
        z = g_ego - centroid
        for mix, gate in zip(self.mix, self.gates):
            z = T.einsum("bcx,cd->bdx", z, mix)
            scale = 2.0 * T.sigmoid(gate(T.smooth_norm(z, axis=-1)))
            z = z * T.reshape(scale, scale.shape + (1,))
        return T.einsum("bcx,ct->btx", z, self.readout) + centroid


# -- full model ---------------------------------------------------------------------
def ego_frames(batch: SceneBatch) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-scene ego position [B, 2], heading [B] and degenerate flags [B]."""
    poses = [geometry.ego_pose(hist, -1) for hist in batch.agents[:, 0]]
    pos = batch.agents[:, 0, -1].copy()
    heading = np.array([p.heading for p in poses])
    degenerate = np.array([p.degenerate for p in poses], dtype=bool)
    return pos, heading, degenerate


def ego_frame_map(batch: SceneBatch, map_mode: str) -> np.ndarray:
    """Lane points per map mode; padded waypoints stay zero."""
    pos, heading, _ = ego_frames(batch)
    lanes = batch.lanes - pos[:, None, None, :]
    if map_mode == "translate_rotate":
        c, s = np.cos(heading), np.sin(heading)
        # row-vector form of R(heading)^T v
        rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # [B, 2, 2] = R
        lanes = np.einsum("bqlx,bxy->bqly", lanes, rot)
    elif map_mode != "translate_only":
        raise ValueError(f"map mode {map_mode!r} has no ego-frame map")
    return np.where(batch.lane_mask[..., None], lanes, 0.0)


class MotionPredictor:
    """Ego-frame map -> map encoder -> equivariant backbone -> decoder."""

    def __init__(self, cfg: RunConfig, seed: Optional[int] = None):
        self.cfg = cfg.resolved()
        self.store = ParameterStore()
        rng = np.random.default_rng(self.cfg.seed if seed is None else seed)
        self.encoder = MapEncoder(self.store, self.cfg, rng) if self.cfg.map_mode != "none" else None
        self.backbone = EquivariantBackbone(self.store, self.cfg, rng)
        self.decoder = EquivariantDecoder(self.store, self.cfg, rng)

    def num_parameters(self) -> int:
        return self.store.num_parameters()

    def features(self, batch: SceneBatch):
        pos, _, _ = ego_frames(batch)
        m = batch.agent_mask
        centered = np.where(m[:, :, None, None], batch.agents - pos[:, None, None, :], 0.0)
        ctx = None
        if self.encoder is not None:
            ctx = self.encoder(ego_frame_map(batch, self.cfg.map_mode), batch.lane_mask)
        return fuse_features(centered, m, ctx, self.cfg.d_ctx)

    def predict_relative(self, batch: SceneBatch) -> T.Tensor:
        """Predicted ego futures [B, T_out, 2] in meters relative to the ego's current position."""
        g, _ = self.backbone(self.features(batch))
        return self.decoder(g[:, 0]) * LENGTH_SCALE

    def predict_tensor(self, batch: SceneBatch) -> T.Tensor:
        """Predicted ego futures [B, T_out, 2] in world coordinates (graph recorded)."""
        pos, _, _ = ego_frames(batch)
        return self.predict_relative(batch) + pos[:, None, :]

    def predict(self, batch: SceneBatch) -> np.ndarray:
        with T.no_grad():
            return self.predict_tensor(batch).data

    def loss(self, batch: SceneBatch) -> T.Tensor:
        if batch.future is None:
            raise ValueError("batch has no ground-truth futures")
        # Same value as comparing world coordinates, without rounding at the
        # scale of the world offset.
        pos, _, _ = ego_frames(batch)
        return ade_loss(self.predict_relative(batch), batch.future - pos[:, None, :])

    def forward(self, scene: Scene) -> PredictionReport:
        batch = collate([scene])
        _, _, degenerate = ego_frames(batch)
        warnings = []
        if degenerate[0] and self.cfg.map_mode == "translate_rotate":
            warnings.append("degenerate ego heading: stationary history, identity rotation used")
        pred = self.predict(batch)[0]
        report = PredictionReport(scene.scene_id, pred, warnings=warnings)
        if scene.future is not None:
            horizons = computable_horizons(len(scene.future), self.cfg.rate_hz)
            report.ade, report.fde = metrics(pred, scene.future, self.cfg.rate_hz, horizons)
        return report
