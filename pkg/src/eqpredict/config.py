"""Run and synthetic-data configuration, read from flat ``key = value`` files."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

MAP_MODES = ("none", "translate_only", "translate_rotate")
ENCODER_KINDS = ("transformer", "single_attention", "none")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # Scene extents
    t_in: int = 20
    t_out: int = 30
    n_agents: int = 4
    n_lanes: int = 10
    lane_points: int = 100
    # Model
    repeats: int = 20
    hidden_dim: int = 64
    mlp_layers: int = 4
    n_heads: int = 12
    d_model: Optional[int] = None  # default: smallest multiple of n_heads >= hidden_dim
    d_ctx: Optional[int] = None  # default: hidden_dim
    ffn_dim: Optional[int] = None  # default: 2 * d_model
    channels: Optional[int] = None  # default: hidden_dim // 4
    n_categories: int = 4
    map_mode: str = "translate_rotate"
    encoder: str = "transformer"
    # Optimization
    lr: float = 1e-5
    epochs: int = 20
    batch_size: int = 512
    seed: int = 0
    rate_hz: int = 10

    def resolved(self) -> "RunConfig":
        d_model = self.d_model
        if d_model is None:
            d_model = -(-self.hidden_dim // self.n_heads) * self.n_heads
        cfg = replace(
            self,
            d_model=d_model,
            d_ctx=self.d_ctx if self.d_ctx is not None else self.hidden_dim,
            ffn_dim=self.ffn_dim if self.ffn_dim is not None else 2 * d_model,
            channels=self.channels if self.channels is not None else max(1, self.hidden_dim // 4),
        )
        if self.map_mode == "none" or self.encoder == "none":
            cfg = replace(cfg, map_mode="none", encoder="none")
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for name in ("t_out", "n_agents", "n_lanes", "lane_points", "repeats", "hidden_dim",
                     "mlp_layers", "n_heads", "n_categories", "epochs", "batch_size", "rate_hz"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.t_in < 2:
            raise ConfigError("t_in must be at least 2")
        if self.map_mode not in MAP_MODES:
            raise ConfigError(f"map_mode must be one of {MAP_MODES}")
        if self.encoder not in ENCODER_KINDS:
            raise ConfigError(f"encoder must be one of {ENCODER_KINDS}")
        if self.d_model is not None and self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    @property
    def scene_dims(self) -> "SceneDims":
        return SceneDims(self.t_in, self.t_out, self.n_agents, self.n_lanes, self.lane_points)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items() if v is not None)

    def config_hash(self) -> str:
        return hashlib.sha256(self.resolved().to_text().encode()).hexdigest()[:16]

    def diff(self, other: "RunConfig", keys=None) -> Dict[str, Tuple[object, object]]:
        a, b = asdict(self.resolved()), asdict(other.resolved())
        keys = keys or a.keys()
        return {k: (a[k], b[k]) for k in keys if a[k] != b[k]}


@dataclass(frozen=True)
class SceneDims:
    t_in: int = 20
    t_out: int = 30
    n_agents: int = 4
    n_lanes: int = 10
    lane_points: int = 100


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_scenes: int = 100
    train_ratio: float = 0.8
    val_ratio: float = 0.1
    test_ratio: float = 0.1
    curvature_min: float = 0.0  # |curvature| range, 1/m; sign drawn uniformly
    curvature_max: float = 0.03
    speed_min: float = 4.0  # m/s
    speed_max: float = 14.0
    noise_sigma: float = 0.05  # m, perpendicular jitter
    lane_width: float = 3.5
    max_lanes: int = 0  # lanes generated per scene before nearest-Q selection; 0 = n_lanes + 1
    max_agents: int = 0  # raw agents per scene before nearest-N selection; 0 = n_agents + 1
    world_extent: float = 500.0  # random global placement range, m

    def validate(self) -> None:
        if not (0 <= self.curvature_min <= self.curvature_max):
            raise ConfigError("curvature range must satisfy 0 <= min <= max")
        if not (0 < self.speed_min <= self.speed_max):
            raise ConfigError("speed range must satisfy 0 < min <= max")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        ratios = (self.train_ratio, self.val_ratio, self.test_ratio)
        if min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError("split ratios must be non-negative and sum to 1")
        if self.n_scenes < 1:
            raise ConfigError("n_scenes must be positive")

    @property
    def ratios(self) -> Tuple[float, float, float]:
        return (self.train_ratio, self.val_ratio, self.test_ratio)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


FULL = RunConfig()
DESK = RunConfig(
    t_in=10, t_out=15, n_agents=4, n_lanes=4, lane_points=20, repeats=4, hidden_dim=32,
    n_heads=4, batch_size=32, lr=1e-3, epochs=20,
)
PRESETS = {"full": FULL, "desk": DESK}

_SYNTH_KEYS = {f.name for f in fields(SynthConfig)} - {"seed"}
_RUN_KEYS = {f.name for f in fields(RunConfig)}


def _coerce(cls, key: str, raw: str):
    ftype = {f.name: f.type for f in fields(cls)}[key]
    ftype = str(ftype)
    try:
        if raw.lower() == "none" and "Optional" in ftype:
            return None
        if "int" in ftype:
            return int(raw)
        if "float" in ftype:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_flat(text: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def build_configs(values: Mapping[str, str]) -> Tuple[RunConfig, SynthConfig]:
    """Split a flat mapping into run and synthesis configs (``preset`` picks the base)."""
    values = dict(values)
    preset = values.pop("preset", "full")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    run_kw, synth_kw = {}, {}
    for key, raw in values.items():
        if key in _RUN_KEYS:
            run_kw[key] = _coerce(RunConfig, key, raw)
            if key == "seed":
                synth_kw["seed"] = run_kw[key]
        elif key in _SYNTH_KEYS:
            synth_kw[key] = _coerce(SynthConfig, key, raw)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    run = replace(PRESETS[preset], **run_kw)
    synth = SynthConfig(**synth_kw)
    run.resolved()
    synth.validate()
    return run, synth


def load_config(path: Union[str, Path, None], overrides: Optional[Mapping[str, str]] = None):
    values = parse_flat(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return build_configs(values)


def run_config_from_text(text: str) -> RunConfig:
    values = parse_flat(text)
    return RunConfig(**{k: _coerce(RunConfig, k, v) for k, v in values.items()})
