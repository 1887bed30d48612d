"""Scene schema, CSV serialization, padding/masking, synthetic scenes and splits.

Scene CSV layout (one file per scene)::

    record_type,entity_id,role,index,x,y
    agent,<id>,ego,<step>,<x>,<y>        # steps 0..T_in-1 history, T_in..T_in+T_out-1 future
    agent,<id>,neighbor,<step>,<x>,<y>   # steps 0..T_in-1
    lane,<id>,-,<waypoint>,<x>,<y>

Coordinates are written with 9 significant digits. A dataset directory holds
``manifest.json`` and ``scenes/<scene_id>.csv``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import SceneDims, SynthConfig

HEADER = ("record_type", "entity_id", "role", "index", "x", "y")
DT = 0.1  # seconds per step (10 Hz)


class SceneFormatError(ValueError):
    pass


def fmt(value: float) -> str:
    return format(float(value), ".9g")


def quantize(arr: np.ndarray) -> np.ndarray:
    """Round every entry to the 9-significant-digit value the CSV writer emits."""
    flat = [float(fmt(v)) for v in np.asarray(arr, dtype=np.float64).ravel()]
    return np.array(flat, dtype=np.float64).reshape(np.shape(arr))


@dataclass
class RawAgent:
    entity_id: str
    history: np.ndarray  # [T_in, 2]
    is_ego: bool = False


@dataclass
class RawScene:
    scene_id: str
    agents: List[RawAgent]
    lanes: List[Tuple[str, np.ndarray]]  # (id, [n_points <= L, 2])
    future: Optional[np.ndarray] = None  # ego future [T_out, 2]


@dataclass
class Scene:
    """Fixed-size, zero-padded scene. The ego always occupies agent slot 0."""

    scene_id: str
    agents: np.ndarray  # [N, T_in, 2]
    agent_mask: np.ndarray  # [N] bool
    lanes: np.ndarray  # [Q, L, 2]
    lane_mask: np.ndarray  # [Q, L] bool, per waypoint
    future: Optional[np.ndarray] = None  # [T_out, 2]
    agent_ids: Tuple[str, ...] = ()
    lane_ids: Tuple[str, ...] = ()

    ego_index = 0

    @property
    def dims(self) -> SceneDims:
        n, t_in, _ = self.agents.shape
        q, l, _ = self.lanes.shape
        t_out = 0 if self.future is None else len(self.future)
        return SceneDims(t_in, t_out, n, q, l)

    @property
    def ego_history(self) -> np.ndarray:
        return self.agents[0]

    @property
    def ego_position(self) -> np.ndarray:
        return self.agents[0, -1]

    @property
    def lane_valid(self) -> np.ndarray:
        return self.lane_mask.any(axis=1)

    def to_raw(self) -> RawScene:
        agents = [
            RawAgent(self.agent_ids[i], self.agents[i].copy(), is_ego=(i == 0))
            for i in range(int(self.agent_mask.sum()))
        ]
        lanes = [
            (self.lane_ids[q], self.lanes[q][self.lane_mask[q]].copy())
            for q in range(int(self.lane_valid.sum()))
        ]
        future = None if self.future is None else self.future.copy()
        return RawScene(self.scene_id, agents, lanes, future)

    def transformed(self, fn) -> "Scene":
        """Apply a point map ``fn`` to every valid coordinate; padding stays zero."""
        agents = np.where(self.agent_mask[:, None, None], fn(self.agents), 0.0)
        lanes = np.where(self.lane_mask[..., None], fn(self.lanes), 0.0)
        future = None if self.future is None else fn(self.future)
        return Scene(self.scene_id, agents, self.agent_mask.copy(), lanes, self.lane_mask.copy(),
                     future, self.agent_ids, self.lane_ids)

    def check_invariants(self) -> None:
        if not self.agent_mask[0]:
            raise SceneFormatError("ego slot must be valid")
        if np.any(self.agents[~self.agent_mask] != 0.0) or np.any(self.lanes[~self.lane_mask] != 0.0):
            raise SceneFormatError("padded entries must be zero")
        # valid agents are packed at the front
        n_valid = int(self.agent_mask.sum())
        if not self.agent_mask[:n_valid].all():
            raise SceneFormatError("valid agents must precede padded slots")


# -- padding ------------------------------------------------------------------
def pad_scene(raw: RawScene, dims: SceneDims) -> Scene:
    """Zero-pad (or truncate nearest-first) a raw scene to the configured extents.

    Neighbors are ranked by distance to the ego's current position and lanes by
    their nearest waypoint to it; both rankings are stable.
    """
    egos = [a for a in raw.agents if a.is_ego]
    if len(egos) != 1:
        raise SceneFormatError(f"scene {raw.scene_id}: expected exactly one ego, found {len(egos)}")
    ego = egos[0]
    for a in raw.agents:
        if a.history.shape != (dims.t_in, 2):
            raise SceneFormatError(f"agent {a.entity_id}: history shape {a.history.shape}, expected ({dims.t_in}, 2)")
    ego_now = ego.history[-1]
    neighbors = [a for a in raw.agents if not a.is_ego]
    neighbors.sort(key=lambda a: float(np.hypot(*(a.history[-1] - ego_now))))
    kept_agents = [ego] + neighbors[: dims.n_agents - 1]

    for lane_id, pts in raw.lanes:
        if len(pts) == 0 or len(pts) > dims.lane_points:
            raise SceneFormatError(f"lane {lane_id}: {len(pts)} points, expected 1..{dims.lane_points}")
    lanes = sorted(raw.lanes, key=lambda lp: float(np.min(np.hypot(*(lp[1] - ego_now).T))))
    lanes = lanes[: dims.n_lanes]

    agents = np.zeros((dims.n_agents, dims.t_in, 2))
    agent_mask = np.zeros(dims.n_agents, dtype=bool)
    for i, a in enumerate(kept_agents):
        agents[i] = a.history
        agent_mask[i] = True
    lane_arr = np.zeros((dims.n_lanes, dims.lane_points, 2))
    lane_mask = np.zeros((dims.n_lanes, dims.lane_points), dtype=bool)
    for q, (_, pts) in enumerate(lanes):
        lane_arr[q, : len(pts)] = pts
        lane_mask[q, : len(pts)] = True

    future = None
    if raw.future is not None:
        if raw.future.shape != (dims.t_out, 2):
            raise SceneFormatError(f"ego future shape {raw.future.shape}, expected ({dims.t_out}, 2)")
        future = np.array(raw.future, dtype=np.float64)
    return Scene(
        raw.scene_id, agents, agent_mask, lane_arr, lane_mask, future,
        tuple(a.entity_id for a in kept_agents), tuple(lid for lid, _ in lanes),
    )


# -- CSV ----------------------------------------------------------------------
def scene_to_csv(scene: Scene) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for i in range(int(scene.agent_mask.sum())):
        role = "ego" if i == 0 else "neighbor"
        for t, (x, y) in enumerate(scene.agents[i]):
            writer.writerow(("agent", scene.agent_ids[i], role, t, fmt(x), fmt(y)))
        if i == 0 and scene.future is not None:
            t_in = scene.agents.shape[1]
            for t, (x, y) in enumerate(scene.future):
                writer.writerow(("agent", scene.agent_ids[0], role, t_in + t, fmt(x), fmt(y)))
    for q in range(int(scene.lane_valid.sum())):
        for k, (x, y) in enumerate(scene.lanes[q][scene.lane_mask[q]]):
            writer.writerow(("lane", scene.lane_ids[q], "-", k, fmt(x), fmt(y)))
    return buf.getvalue()


def parse_scene_csv(text: str, scene_id: str, dims: SceneDims) -> RawScene:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != HEADER:
        raise SceneFormatError(f"line 1: expected header {','.join(HEADER)}")
    agent_rows: Dict[str, Dict[int, Tuple[float, float]]] = {}
    roles: Dict[str, str] = {}
    lane_rows: Dict[str, Dict[int, Tuple[float, float]]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            kind, eid, role, index, x, y = row
            index_i = int(index)
            xy = (float(x), float(y))
        except ValueError as exc:
            raise SceneFormatError(f"line {lineno}: malformed row {row!r}") from exc
        if not all(math.isfinite(v) for v in xy) or index_i < 0:
            raise SceneFormatError(f"line {lineno}: invalid values {row!r}")
        if kind == "agent":
            if role not in ("ego", "neighbor") or roles.setdefault(eid, role) != role:
                raise SceneFormatError(f"line {lineno}: bad role {role!r} for agent {eid}")
            target = agent_rows.setdefault(eid, {})
        elif kind == "lane":
            target = lane_rows.setdefault(eid, {})
        else:
            raise SceneFormatError(f"line {lineno}: unknown record type {kind!r}")
        if index_i in target:
            raise SceneFormatError(f"line {lineno}: duplicate index {index_i} for {kind} {eid}")
        target[index_i] = xy

    egos = [e for e, r in roles.items() if r == "ego"]
    if not egos:
        raise SceneFormatError(f"scene {scene_id}: no ego track")
    if len(egos) > 1:
        raise SceneFormatError(f"scene {scene_id}: multiple ego tracks {egos}")

    agents, future = [], None
    for eid, steps in agent_rows.items():
        is_ego = roles[eid] == "ego"
        hist_idx = list(range(dims.t_in))
        if any(i not in steps for i in hist_idx):
            raise SceneFormatError(f"agent {eid}: history steps 0..{dims.t_in - 1} incomplete")
        extra = sorted(set(steps) - set(hist_idx))
        if extra:
            fut_idx = list(range(dims.t_in, dims.t_in + dims.t_out))
            if not is_ego or extra != fut_idx:
                raise SceneFormatError(f"agent {eid}: unexpected steps {extra[:3]}...")
            future = np.array([steps[i] for i in fut_idx], dtype=np.float64)
        agents.append(RawAgent(eid, np.array([steps[i] for i in hist_idx], dtype=np.float64), is_ego))
    lanes = []
    for lid, pts in lane_rows.items():
        if sorted(pts) != list(range(len(pts))):
            raise SceneFormatError(f"lane {lid}: waypoint indices are not contiguous from 0")
        lanes.append((lid, np.array([pts[i] for i in range(len(pts))], dtype=np.float64)))
    return RawScene(scene_id, agents, lanes, future)


def save_scene(scene: Scene, path: Union[str, Path]) -> None:
    Path(path).write_text(scene_to_csv(scene))


def load_scene(path: Union[str, Path], dims: SceneDims) -> Scene:
    path = Path(path)
    raw = parse_scene_csv(path.read_text(), path.stem, dims)
    return pad_scene(raw, dims)


# -- synthetic scenes -----------------------------------------------------------
def _arc_point(s: np.ndarray, curvature: float, offset: float = 0.0) -> np.ndarray:
    """Point at arc length ``s`` on a curve starting at the origin heading +x,
    shifted ``offset`` along the left normal."""
    s = np.asarray(s, dtype=np.float64)
    if abs(curvature) < 1e-12:
        base = np.stack([s, np.zeros_like(s)], axis=-1)
        normal = np.broadcast_to([0.0, 1.0], base.shape)
    else:
        ang = curvature * s
        base = np.stack([np.sin(ang) / curvature, (1.0 - np.cos(ang)) / curvature], axis=-1)
        normal = np.stack([-np.sin(ang), np.cos(ang)], axis=-1)
    return base + np.asarray(offset, dtype=np.float64)[..., None] * normal


@dataclass
class _Lane:
    curvature: float
    offset: float = 0.0
    # straight crossing lanes: explicit line through ``anchor`` along ``angle``
    anchor: Optional[np.ndarray] = None
    angle: float = 0.0

    def point(self, s, noise=None) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        if self.anchor is None:
            p = _arc_point(s, self.curvature, self.offset + (0.0 if noise is None else noise))
            return p
        d = np.array([math.cos(self.angle), math.sin(self.angle)])
        n = np.array([-d[1], d[0]])
        noise = 0.0 if noise is None else noise
        return self.anchor + s[..., None] * d + np.asarray(noise)[..., None] * n


def _synth_scene(rng: np.random.Generator, cfg: SynthConfig, dims: SceneDims, scene_id: str) -> Scene:
    steps = dims.t_in + dims.t_out
    curvature = float(rng.uniform(cfg.curvature_min, cfg.curvature_max)) * float(rng.choice([-1.0, 1.0]))
    speed = float(rng.uniform(cfg.speed_min, cfg.speed_max))
    s_start = float(rng.uniform(5.0, 15.0))
    length = s_start + cfg.speed_max * steps * DT + 20.0

    max_lanes = cfg.max_lanes or dims.n_lanes + 1
    n_lanes = int(rng.integers(1, max_lanes + 1))
    lanes = [_Lane(curvature)]
    k = 1
    while len(lanes) < n_lanes:
        if rng.uniform() < 0.25:
            s_cross = float(rng.uniform(0.0, length))
            anchor = _arc_point(np.array(s_cross), curvature)
            angle = float(rng.uniform(0.0, math.pi))
            lanes.append(_Lane(0.0, anchor=anchor - 0.5 * length * np.array([math.cos(angle), math.sin(angle)]), angle=angle))
        else:
            offset = cfg.lane_width * ((k + 1) // 2) * (1 if k % 2 else -1)
            # keep offset lanes clear of the arc's center of curvature
            if abs(curvature) * abs(offset) < 0.5:
                lanes.append(_Lane(curvature, offset=offset))
            k += 1
    s_grid = np.linspace(0.0, length, dims.lane_points)
    lane_pts = [lane.point(s_grid) for lane in lanes]

    t = np.arange(steps) * DT
    ego_s = s_start + speed * t
    ego_track = lanes[0].point(ego_s, rng.normal(0.0, cfg.noise_sigma, size=steps) if cfg.noise_sigma > 0 else None)

    max_agents = cfg.max_agents or dims.n_agents + 1
    n_neighbors = int(rng.integers(0, max_agents))
    neighbor_tracks = []
    for _ in range(n_neighbors):
        lane = lanes[int(rng.integers(0, len(lanes)))]
        v = float(rng.uniform(cfg.speed_min, cfg.speed_max))
        s0 = float(rng.uniform(0.0, length - v * dims.t_in * DT))
        noise = rng.normal(0.0, cfg.noise_sigma, size=dims.t_in) if cfg.noise_sigma > 0 else None
        neighbor_tracks.append(lane.point(s0 + v * t[: dims.t_in], noise))

    theta = float(rng.uniform(0.0, 2.0 * math.pi))
    shift = rng.uniform(-cfg.world_extent, cfg.world_extent, size=2)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])

    def place(p):
        return quantize(np.asarray(p) @ rot.T + shift)

    agents = [RawAgent("ego", place(ego_track[: dims.t_in]), is_ego=True)]
    agents += [RawAgent(f"a{i + 1}", place(tr)) for i, tr in enumerate(neighbor_tracks)]
    raw = RawScene(
        scene_id,
        agents,
        [(f"l{q}", place(p)) for q, p in enumerate(lane_pts)],
        place(ego_track[dims.t_in:]),
    )
    return pad_scene(raw, dims)


def synth_generate(cfg: SynthConfig, dims: SceneDims) -> List[Scene]:
    """Deterministic lane-following scenes; scene ``i`` draws from its own
    generator seeded by ``(cfg.seed, i)``."""
    cfg.validate()
    return [
        _synth_scene(np.random.default_rng([cfg.seed, i]), cfg, dims, f"s{cfg.seed}_{i:05d}")
        for i in range(cfg.n_scenes)
    ]


def split(scenes: Sequence, ratios: Sequence[float], seed: int) -> Tuple[list, list, list]:
    """Deterministic shuffled partition into (train, val, test)."""
    if not scenes:
        raise ValueError("cannot split an empty scene list")
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    n = len(scenes)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    return tuple([scenes[i] for i in part] for part in parts)


# -- dataset directories --------------------------------------------------------
SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    dims: SceneDims
    splits: Dict[str, List[Scene]]
    manifest: dict = field(default_factory=dict)


def write_dataset(
    out_dir: Union[str, Path],
    parts: Dict[str, Sequence[Scene]],
    dims: SceneDims,
    synth: Optional[SynthConfig] = None,
) -> Path:
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    for scenes in parts.values():
        for scene in scenes:
            save_scene(scene, out / "scenes" / f"{scene.scene_id}.csv")
    manifest = {
        "format_version": 1,
        "dims": asdict(dims),
        "seed": None if synth is None else synth.seed,
        "synth": None if synth is None else asdict(synth),
        "splits": {name: [s.scene_id for s in parts.get(name, [])] for name in SPLITS},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_dataset(data_dir: Union[str, Path], splits: Sequence[str] = SPLITS) -> Dataset:
    root = Path(data_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        dims = SceneDims(**manifest["dims"])
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise SceneFormatError(f"{root}: unreadable manifest ({exc})") from exc
    loaded = {}
    for name in splits:
        ids = manifest["splits"].get(name, [])
        scenes = []
        for sid in ids:
            try:
                scenes.append(load_scene(root / "scenes" / f"{sid}.csv", dims))
            except SceneFormatError as exc:
                raise SceneFormatError(f"{sid}.csv: {exc}") from exc
        loaded[name] = scenes
    return Dataset(dims, loaded, manifest)


@dataclass
class SceneBatch:
    agents: np.ndarray  # [B, N, T_in, 2]
    agent_mask: np.ndarray  # [B, N]
    lanes: np.ndarray  # [B, Q, L, 2]
    lane_mask: np.ndarray  # [B, Q, L]
    future: Optional[np.ndarray]  # [B, T_out, 2]
    scene_ids: Tuple[str, ...]

    def __len__(self) -> int:
        return len(self.scene_ids)

    def take(self, index) -> "SceneBatch":
        index = np.asarray(index)
        return SceneBatch(
            self.agents[index], self.agent_mask[index], self.lanes[index], self.lane_mask[index],
            None if self.future is None else self.future[index],
            tuple(self.scene_ids[i] for i in index),
        )


def collate(scenes: Sequence[Scene]) -> SceneBatch:
    futures = [s.future for s in scenes]
    return SceneBatch(
        np.stack([s.agents for s in scenes]),
        np.stack([s.agent_mask for s in scenes]),
        np.stack([s.lanes for s in scenes]),
        np.stack([s.lane_mask for s in scenes]),
        None if any(f is None for f in futures) else np.stack(futures),
        tuple(s.scene_id for s in scenes),
    )
