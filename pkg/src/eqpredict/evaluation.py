"""Metric tables and the rigid-motion equivariance audit."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .geometry import RigidTransform, Vec2, apply_rigid, rotation_matrix
from .predictor import MotionPredictor, constant_velocity_baseline, ego_frames, horizon_label, metrics
from .scene_data import Scene, collate

# Audit passes iff the worst point deviation stays below this (meters).
AUDIT_TOLERANCE = 1e-8


@dataclass
class MetricRow:
    split: str
    method: str
    ade: Dict[float, float]
    fde: Dict[float, float]
    parameters: int = 0
    training_time: str = ""

    def cells(self, horizons: Sequence[float]) -> List[str]:
        vals = [f"{self.ade[h]:.4f}" for h in horizons] + [f"{self.fde[h]:.4f}" for h in horizons]
        return [self.split, self.method] + vals + [str(self.parameters), self.training_time]


def table_header(horizons: Sequence[float]) -> List[str]:
    return (["split", "method"] + [f"ade_{horizon_label(h)}" for h in horizons]
            + [f"fde_{horizon_label(h)}" for h in horizons] + ["parameters", "training_time"])


def scene_metrics(preds: np.ndarray, scenes: Sequence[Scene], rate_hz: int, horizons: Sequence[float]):
    """Average of per-scene ADE/FDE."""
    per = [metrics(p, s.future, rate_hz, horizons) for p, s in zip(preds, scenes)]
    ade = {h: float(np.mean([a[h] for a, _ in per])) for h in horizons}
    fde = {h: float(np.mean([f[h] for _, f in per])) for h in horizons}
    return ade, fde


def predict_scenes(model: MotionPredictor, scenes: Sequence[Scene], chunk: int = 256) -> np.ndarray:
    out = [model.predict(collate(scenes[i : i + chunk])) for i in range(0, len(scenes), chunk)]
    return np.concatenate(out) if out else np.zeros((0, model.cfg.t_out, 2))


def baseline_predictions(scenes: Sequence[Scene], t_out: int) -> np.ndarray:
    return np.stack([constant_velocity_baseline(s.ego_history, t_out) for s in scenes])


# -- equivariance audit ---------------------------------------------------------
def rotation_about(theta: float, center) -> RigidTransform:
    """Rotation by ``theta`` about ``center`` as a rigid transform."""
    c = np.asarray(center, dtype=np.float64)
    return RigidTransform(theta, Vec2.from_array(c - rotation_matrix(theta) @ c))


def scene_centroid(scene: Scene) -> np.ndarray:
    return scene.agents[scene.agent_mask].reshape(-1, 2).mean(axis=0)


def transform_scene(scene: Scene, g: RigidTransform) -> Scene:
    return scene.transformed(lambda p: apply_rigid(p, g))


def random_transform(rng: np.random.Generator, max_translation: float = 1000.0) -> RigidTransform:
    theta = float(rng.uniform(0.0, 2.0 * math.pi))
    t = rng.uniform(-max_translation, max_translation, size=2)
    return RigidTransform(theta, Vec2.from_array(t))


@dataclass
class AuditReport:
    max_deviation: float
    trials: int
    scenes_checked: int
    degenerate: List[str] = field(default_factory=list)
    worst_scene: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.max_deviation < AUDIT_TOLERANCE

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [
            f"{status} max deviation {self.max_deviation:.3e} m (tolerance {AUDIT_TOLERANCE:.0e})",
            f"scenes checked {self.scenes_checked}, transforms per scene {self.trials}",
        ]
        if self.worst_scene:
            lines.append(f"worst scene {self.worst_scene}")
        if self.degenerate:
            lines.append(f"excluded degenerate-heading scenes: {', '.join(self.degenerate)}")
        return "\n".join(lines)


def equivariance_audit(
    model: MotionPredictor,
    scenes: Sequence[Scene],
    trials: int = 5,
    seed: int = 0,
    transforms: Optional[Sequence[RigidTransform]] = None,
) -> AuditReport:
    """Compare predict(g . scene) against g . predict(scene).

    ``transforms`` fixes the transforms (each applied to every scene); otherwise
    ``trials`` random ones are drawn per scene.
    """
    if trials < 1 and transforms is None:
        raise ValueError("trials must be at least 1")
    batch = collate(list(scenes))
    _, _, degenerate = ego_frames(batch)
    kept = [s for s, d in zip(scenes, degenerate) if not d]
    excluded = [s.scene_id for s, d in zip(scenes, degenerate) if d]
    if not kept:
        return AuditReport(0.0, 0, 0, excluded)
    base = predict_scenes(model, kept)
    rng = np.random.default_rng(seed)
    n_trials = len(transforms) if transforms is not None else trials
    worst, worst_id = 0.0, None
    for k in range(n_trials):
        gs = [transforms[k] if transforms is not None else random_transform(rng) for _ in kept]
        moved = predict_scenes(model, [transform_scene(s, g) for s, g in zip(kept, gs)])
        expected = np.stack([apply_rigid(p, g) for p, g in zip(base, gs)])
        dev = np.sqrt(np.sum((moved - expected) ** 2, axis=-1)).max(axis=-1)
        i = int(np.argmax(dev))
        if dev[i] > worst:
            worst, worst_id = float(dev[i]), kept[i].scene_id
    return AuditReport(worst, n_trials, len(kept), excluded, worst_id)
