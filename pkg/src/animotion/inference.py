"""Reconstruction and cross-clip animation with trained models."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .dataset import VideoClip, clip_to_tensor, tensor_to_clip
from .keypoints import KeypointSet

MODES = ("absolute", "relative")


def relative_keypoints(kp_source: KeypointSet, kp_driving: KeypointSet,
                       kp_driving_initial: KeypointSet) -> KeypointSet:
    """Transplant driving motion relative to the first driving frame onto the source."""
    coords = kp_source.coords + (kp_driving.coords - kp_driving_initial.coords)
    jac = kp_driving.jacobians @ torch.linalg.inv(kp_driving_initial.jacobians) @ kp_source.jacobians
    return KeypointSet(coords, jac, None, kp_source.num_kp)


def _expand(kp: KeypointSet, n: int) -> KeypointSet:
    return KeypointSet(kp.coords.expand(n, -1, -1), kp.jacobians.expand(n, -1, -1, -1), None, kp.num_kp)


@dataclass
class Outputs:
    """Per-frame outputs of one animation run, all (T, ...) tensors."""

    final: torch.Tensor
    content: torch.Tensor
    texture: torch.Tensor
    occlusion: torch.Tensor
    attention: torch.Tensor
    driving_keypoints: torch.Tensor


@torch.no_grad()
def _run(models, source: torch.Tensor, driving: torch.Tensor, mode: str, chunk: int) -> Outputs:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    was_training = models.training
    models.eval()
    parts = {f: [] for f in Outputs.__dataclass_fields__}
    try:
        kp_source = models.keypoint_detector(source[None])
        kp_initial = models.keypoint_detector(driving[:1])
        for start in range(0, len(driving), chunk):
            frames = driving[start:start + chunk]
            n = len(frames)
            kp_drv = models.keypoint_detector(frames)
            parts["driving_keypoints"].append(kp_drv.coords)
            if mode == "relative":
                kp_drv = relative_keypoints(_expand(kp_source, n), kp_drv, _expand(kp_initial, n))
            motion, out = models.animate(source[None].expand(n, -1, -1, -1), _expand(kp_source, n), kp_drv)
            parts["final"].append(out.final)
            parts["content"].append(out.content)
            parts["texture"].append(out.texture)
            parts["occlusion"].append(motion.occlusion)
            parts["attention"].append(motion.attention)
    finally:
        models.train(was_training)
    return Outputs(**{k: torch.cat(v) for k, v in parts.items()})


def reconstruct(clip: VideoClip, models, chunk: int = 16, return_outputs: bool = False):
    """Drive the clip's middle frame with the clip itself (absolute keypoints)."""
    if len(clip) < 2:
        raise ValueError("reconstruction needs at least 2 frames")
    frames = clip_to_tensor(clip)
    source = frames[len(clip) // 2]
    outs = _run(models, source, frames, "absolute", chunk)
    result = tensor_to_clip(outs.final, like=clip)
    return (result, outs) if return_outputs else result


def animate(source, driving: VideoClip, models, mode: str = "relative", chunk: int = 16,
            return_outputs: bool = False):
    """Animate a (H, W, C) source frame with the motion of ``driving``."""
    src = torch.from_numpy(np.ascontiguousarray(source, dtype=np.float32)).permute(2, 0, 1)
    frames = clip_to_tensor(driving)
    if src.shape != frames.shape[1:]:
        raise ValueError(f"source {tuple(src.shape)} and driving frames {tuple(frames.shape[1:])} differ")
    outs = _run(models, src, frames, mode, chunk)
    result = tensor_to_clip(outs.final, like=driving, clip_id=f"{driving.clip_id}_animated")
    return (result, outs) if return_outputs else result
