"""scikit-learn style front end: ``fit`` trains on clips, ``predict`` runs the
reconstruction task, ``transform`` animates (source, driving) pairs."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import Config, apply_overrides, profile_config
from .dataset import VideoClip
from .inference import MODES, animate, reconstruct
from .metrics import l1_psnr
from .training import Checkpoint, fit, load_checkpoint, restore


def check_clips(X, resolution: Optional[int] = None, num_channels: Optional[int] = None,
                min_frames: int = 2) -> list:
    """Validate a sequence of clips against the model's input contract."""
    if isinstance(X, VideoClip):
        X = [X]
    clips = list(X)
    if not clips:
        raise ValueError("expected at least one clip")
    for clip in clips:
        if not isinstance(clip, VideoClip):
            raise TypeError(f"expected VideoClip, got {type(clip).__name__}")
        if len(clip) < min_frames:
            raise ValueError(f"clip {clip.clip_id!r} has fewer than {min_frames} frames")
        if resolution is not None and clip.resolution != resolution:
            raise ValueError(f"clip {clip.clip_id!r} is {clip.resolution}px, model expects {resolution}px")
        if num_channels is not None and clip.num_channels != num_channels:
            raise ValueError(
                f"clip {clip.clip_id!r} has {clip.num_channels} channels, model expects {num_channels}")
    return clips


def check_frame(frame, resolution: int, num_channels: int) -> np.ndarray:
    arr = np.asarray(frame, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape != (resolution, resolution, num_channels):
        raise ValueError(f"source frame {arr.shape} does not match ({resolution}, {resolution}, {num_channels})")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("source frame values must lie in [0, 1]")
    return arr


class MotionTransferModel(BaseEstimator):
    """Keypoint-driven image animation model.

    Parameters
    ----------
    profile : {"desk", "paper"}
        Base hyperparameter profile.
    overrides : dict, optional
        Nested config overrides, e.g. ``{"train": {"num_repeats": 5}}``.
    epochs, batch_size, learning_rate, seed : optional
        Shortcuts overriding the matching ``train`` fields.
    mode : {"relative", "absolute"}
        Keypoint mode used by :meth:`transform`.
    """

    def __init__(self, profile="desk", overrides=None, epochs=None, batch_size=None,
                 learning_rate=None, seed=0, mode="relative", deterministic=True):
        self.profile = profile
        self.overrides = overrides
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.mode = mode
        self.deterministic = deterministic

    def build_config(self) -> Config:
        config = profile_config(self.profile)
        if self.overrides:
            config = apply_overrides(config, self.overrides)
        train = {"seed": self.seed}
        for name in ("epochs", "batch_size", "learning_rate"):
            value = getattr(self, name)
            if value is not None:
                train[name] = value
        return apply_overrides(config, {"train": train})

    def fit(self, X, y=None, out_dir=None, resume=None):
        config = self.build_config()
        clips = check_clips(X, config.model.resolution, config.model.num_channels)
        result = fit(clips, config, out_dir=out_dir, resume=resume, deterministic=self.deterministic)
        self.config_ = config
        self.models_ = result.models
        self.checkpoint_ = result.checkpoint
        self.log_ = result.log
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint, **params):
        ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
        config = ckpt.parsed_config
        est = cls(profile=config.profile, seed=config.train.seed, **params)
        est.config_ = config
        est.models_, _ = restore(ckpt, config, with_optimizers=False)
        est.checkpoint_ = ckpt
        est.log_ = []
        return est

    def _check(self):
        check_is_fitted(self, "models_")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def predict(self, X):
        """Reconstruction task: each clip driven by itself from its middle frame."""
        self._check()
        m = self.config_.model
        return [reconstruct(c, self.models_) for c in check_clips(X, m.resolution, m.num_channels)]

    def transform(self, X):
        """Animate each ``(source_frame, driving_clip)`` pair."""
        self._check()
        m = self.config_.model
        out = []
        for source, driving in X:
            src = check_frame(source, m.resolution, m.num_channels)
            (drv,) = check_clips([driving], m.resolution, m.num_channels, min_frames=1)
            out.append(animate(src, drv, self.models_, mode=self.mode))
        return out

    def score(self, X, y=None):
        """Negative mean reconstruction L1 (higher is better)."""
        clips = check_clips(X)
        recon = self.predict(clips)
        pairs = [(r, f) for real, fake in zip(clips, recon) for r, f in zip(real.frames, fake.frames)]
        return -l1_psnr(pairs)[0]
