"""Keypoint-driven image animation with a content/texture dual-decoder generator."""

__version__ = "0.1.0"

from .config import Config, ConfigError, desk_config, load_config, paper_config  # noqa: E402
from .dataset import VideoClip, load_dataset, synth_generate  # noqa: E402
from .estimator import MotionTransferModel  # noqa: E402
from .inference import animate, reconstruct  # noqa: E402

__all__ = [
    "Config", "ConfigError", "MotionTransferModel", "VideoClip", "animate", "desk_config",
    "load_config", "load_dataset", "paper_config", "reconstruct", "synth_generate",
]
