"""Planar rigid-motion helpers and the ego-frame map transform.

Points are handled as float64 arrays whose last axis has length 2. The
dataclasses below are small immutable value types used at API edges; the
array functions accept anything ``np.asarray`` can turn into ``(..., 2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

TAU = 2.0 * math.pi
# Displacements shorter than this do not define a heading.
HEADING_EPS = 1e-9

ArrayF = npt.NDArray[np.float64]


def normalize_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(float(angle), TAU)
    if wrapped <= -math.pi:
        wrapped += TAU
    return wrapped


@dataclass(frozen=True)
class Vec2:
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite Vec2 ({self.x}, {self.y})")

    @property
    def array(self) -> ArrayF:
        return np.array([self.x, self.y], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: npt.ArrayLike) -> "Vec2":
        a = np.asarray(arr, dtype=np.float64).reshape(2)
        return cls(float(a[0]), float(a[1]))


PointsLike = Union[npt.ArrayLike, Sequence[Vec2]]


def as_points(points: PointsLike) -> ArrayF:
    """Convert a sequence of ``Vec2`` or an array-like into a float64 ``(..., 2)`` array."""
    if isinstance(points, Vec2):
        return points.array
    if isinstance(points, (list, tuple)) and points and isinstance(points[0], Vec2):
        return np.array([[p.x, p.y] for p in points], dtype=np.float64)
    arr = np.asarray(points, dtype=np.float64)
    if arr.shape[-1:] != (2,):
        raise ValueError(f"expected trailing axis of length 2, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Pose:
    """Agent position plus heading; ``degenerate`` marks a fallback heading."""

    position: Vec2
    heading: float
    degenerate: bool = False

    def __post_init__(self) -> None:
        if not math.isfinite(self.heading):
            raise ValueError("non-finite heading")
        object.__setattr__(self, "heading", normalize_angle(self.heading))


@dataclass(frozen=True)
class RigidTransform:
    """p -> R(rotation) p + translation."""

    rotation: float = 0.0
    translation: Vec2 = field(default_factory=lambda: Vec2(0.0, 0.0))

    def __post_init__(self) -> None:
        if not math.isfinite(self.rotation):
            raise ValueError("non-finite rotation")
        object.__setattr__(self, "rotation", normalize_angle(self.rotation))

    def apply(self, points: PointsLike) -> ArrayF:
        return apply_rigid(points, self)

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ first`` (apply ``first``, then ``self``)."""
        t = rotation_matrix(self.rotation) @ first.translation.array + self.translation.array
        return RigidTransform(self.rotation + first.rotation, Vec2.from_array(t))

    def inverse(self) -> "RigidTransform":
        t = -(rotation_matrix(self.rotation).T @ self.translation.array)
        return RigidTransform(-self.rotation, Vec2.from_array(t))

    def apply_pose(self, pose: Pose) -> Pose:
        pos = apply_rigid(pose.position.array, self)
        return Pose(Vec2.from_array(pos), pose.heading + self.rotation, pose.degenerate)


def displacement_velocity(history: PointsLike, t: int) -> ArrayF:
    """Per-step displacement ``history[t] - history[t-1]``."""
    h = as_points(history)
    if t < 0:
        t += len(h)
    if t == 0:
        raise ValueError("no predecessor step")
    if not 0 < t < len(h):
        raise IndexError(f"step {t} outside history of length {len(h)}")
    return h[t] - h[t - 1]


def heading(history: PointsLike, t: int) -> Tuple[float, bool]:
    """Heading angle at step ``t`` from the latest non-vanishing displacement.

    Scans backwards from ``t`` for a displacement of norm >= ``HEADING_EPS``.
    When none exists the heading is 0 and the degenerate flag is set.
    """
    h = as_points(history)
    if t < 0:
        t += len(h)
    if t < 1:
        raise ValueError("no predecessor step")
    for step in range(t, 0, -1):
        v = h[step] - h[step - 1]
        if math.hypot(v[0], v[1]) >= HEADING_EPS:
            return normalize_angle(math.atan2(v[1], v[0])), False
    return 0.0, True


def ego_pose(history: PointsLike, t: int = -1) -> Pose:
    h = as_points(history)
    theta, degenerate = heading(h, t)
    return Pose(Vec2.from_array(h[t]), theta, degenerate)


def rotation_matrix(theta: float) -> ArrayF:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


def to_ego_frame(points: PointsLike, pose: Pose) -> ArrayF:
    """Express world points in the ego frame: translate to the ego, then rotate
    so that the ego heading points along +x (``R(heading)^T (p - position)``)."""
    p = as_points(points)
    rot = rotation_matrix(pose.heading)
    # Row vectors: (R^T v)^T = v^T R
    return (p - pose.position.array) @ rot


def from_ego_frame(points: PointsLike, pose: Pose) -> ArrayF:
    """Inverse of :func:`to_ego_frame`."""
    p = as_points(points)
    rot = rotation_matrix(pose.heading)
    return p @ rot.T + pose.position.array


def translate_to_ego(points: PointsLike, pose: Pose) -> ArrayF:
    """Translation-only ego frame (heading ignored)."""
    return as_points(points) - pose.position.array


def apply_rigid(points: PointsLike, g: RigidTransform) -> ArrayF:
    p = as_points(points)
    return p @ rotation_matrix(g.rotation).T + g.translation.array
