"""Keypoint detector: K self-supervised plus S supervised keypoints, each
with a 2x2 local Jacobian, read off softmax heatmaps of a U-Net."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .config import DetectorConfig
from .layers import AntiAliasInterpolation2d, Hourglass, make_coordinate_grid


@dataclass
class KeypointSet:
    """Batched detector output; keypoints ``[:num_kp]`` are self-supervised."""

    coords: torch.Tensor        # (B, K+S, 2)
    jacobians: torch.Tensor     # (B, K+S, 2, 2)
    heatmaps: Optional[torch.Tensor] = None  # (B, K+S, H', W')
    num_kp: Optional[int] = None

    def __post_init__(self):
        if self.num_kp is None:
            self.num_kp = self.coords.shape[1]

    @property
    def self_coords(self):
        return self.coords[:, :self.num_kp]

    @property
    def sup_coords(self):
        return self.coords[:, self.num_kp:]

    @property
    def self_jacobians(self):
        return self.jacobians[:, :self.num_kp]

    def select(self, include_sup: bool = True) -> "KeypointSet":
        if include_sup:
            return self
        hm = None if self.heatmaps is None else self.heatmaps[:, :self.num_kp]
        return KeypointSet(self.self_coords, self.self_jacobians, hm, self.num_kp)

    def detach(self) -> "KeypointSet":
        hm = None if self.heatmaps is None else self.heatmaps.detach()
        return KeypointSet(self.coords.detach(), self.jacobians.detach(), hm, self.num_kp)


def soft_argmax(heatmap: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Expected coordinate of a normalized heatmap (..., H, W) -> (..., 2)."""
    if check:
        total = heatmap.detach().sum(dim=(-2, -1))
        if (heatmap.detach() < 0).any() or not torch.allclose(total, torch.ones_like(total), atol=1e-4):
            raise ValueError("soft_argmax expects nonnegative heatmaps summing to 1")
    h, w = heatmap.shape[-2:]
    grid = make_coordinate_grid(h, w, dtype=heatmap.dtype, device=heatmap.device)
    return (heatmap[..., None] * grid).sum(dim=(-3, -2))


def gaussian_heatmap(point: torch.Tensor, resolution, sigma: float) -> torch.Tensor:
    """Normalized isotropic Gaussian centred on ``point`` (..., 2) -> (..., H, W)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    point = torch.as_tensor(point)
    if not point.is_floating_point():
        point = point.double()
    h, w = (resolution, resolution) if isinstance(resolution, int) else resolution
    grid = make_coordinate_grid(h, w, dtype=point.dtype, device=point.device)
    sq = ((grid - point[..., None, None, :]) ** 2).sum(-1)
    # subtracting the minimum keeps wide and narrow kernels finite alike
    logits = -sq / (2 * sigma ** 2)
    logits = logits - logits.amax(dim=(-2, -1), keepdim=True)
    unnorm = torch.exp(logits)
    return unnorm / unnorm.sum(dim=(-2, -1), keepdim=True)


class KeypointDetector(nn.Module):
    """U-Net keypoint and Jacobian regressor operating at heatmap resolution."""

    def __init__(self, config: DetectorConfig, num_channels=3):
        super().__init__()
        self.config = config
        self.num_channels = num_channels
        n = config.num_total
        self.down = AntiAliasInterpolation2d(num_channels, config.scale_factor)
        self.predictor = Hourglass(num_channels, config.block_expansion, config.num_blocks,
                                   config.max_features)
        self.kp = nn.Conv2d(self.predictor.out_filters, n, 7, padding=3)
        self.jacobian = nn.Conv2d(self.predictor.out_filters, 4 * n, 7, padding=3)
        # near-uniform heatmaps at init; distinct channels keep keypoints from collapsing together
        nn.init.normal_(self.kp.weight, std=1e-3)
        nn.init.zeros_(self.kp.bias)
        nn.init.zeros_(self.jacobian.weight)
        with torch.no_grad():
            self.jacobian.bias.copy_(torch.tensor([1.0, 0.0, 0.0, 1.0]).repeat(n))

    def forward(self, frame: torch.Tensor) -> KeypointSet:
        check_frames(frame, self.num_channels)
        feats = self.predictor(self.down(frame))
        logits = self.kp(feats)
        b, n, h, w = logits.shape
        heatmaps = F.softmax(logits.view(b, n, -1) / self.config.temperature, dim=-1).view(b, n, h, w)
        coords = soft_argmax(heatmaps, check=False)
        jac = self.jacobian(feats).view(b, n, 4, h, w)
        jac = (jac * heatmaps[:, :, None]).sum(dim=(-2, -1)).view(b, n, 2, 2)
        return KeypointSet(coords, jac, heatmaps, self.config.num_kp)


def check_frames(frame: torch.Tensor, num_channels: Optional[int] = None):
    if frame.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) frames, got shape {tuple(frame.shape)}")
    if frame.shape[-1] != frame.shape[-2]:
        raise ValueError(f"frames must be square, got {tuple(frame.shape[-2:])}")
    if num_channels is not None and frame.shape[1] != num_channels:
        raise ValueError(f"expected {num_channels} channels, got {frame.shape[1]}")
    lo, hi = frame.detach().aminmax()
    if lo < -1e-6 or hi > 1 + 1e-6:
        raise ValueError("frame values must lie in [0, 1]")


def detect(detector: KeypointDetector, frame) -> KeypointSet:
    """Run ``detector`` on one (C, H, W) frame or a (B, C, H, W) batch."""
    frame = torch.as_tensor(frame)
    single = frame.ndim == 3
    if single:
        frame = frame[None]
    return detector(frame)
