"""SE(2)-equivariant ego-vehicle trajectory prediction with vectorized lane maps."""

from .config import DESK, FULL, RunConfig, SynthConfig
from .predictor import MotionPredictor, PredictionReport
from .scene_data import Scene, load_scene, save_scene, synth_generate

__version__ = "0.1.0"

__all__ = [
    "DESK",
    "FULL",
    "MotionPredictor",
    "PredictionReport",
    "RunConfig",
    "Scene",
    "SynthConfig",
    "load_scene",
    "save_scene",
    "synth_generate",
]
