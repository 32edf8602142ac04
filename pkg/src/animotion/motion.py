"""First-order sparse motion, occlusion-aware dense motion and backward warping."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .config import DenseMotionConfig
from .keypoints import KeypointSet
from .layers import AntiAliasInterpolation2d, Hourglass, make_coordinate_grid

DET_THRESHOLD = 1e-6
DEBUG = os.environ.get("ANIMOTION_DEBUG", "") not in ("", "0")


class SingularJacobianError(ArithmeticError):
    pass


@dataclass
class SparseMotion:
    """(B, N+1, H, W, 2) backward maps; slot 0 is the identity (background)."""

    grids: torch.Tensor

    @property
    def num_motions(self):
        return self.grids.shape[1]


@dataclass
class MotionField:
    deformation: torch.Tensor      # (B, H, W, 2)
    occlusion: torch.Tensor        # (B, 1, H, W)
    attention: torch.Tensor        # (B, N+1, H, W)
    sparse: Optional[SparseMotion] = None
    sparse_deformed: Optional[torch.Tensor] = None

    def resized(self, size) -> "MotionField":
        """Bilinearly resample deformation, occlusion and attention to ``size``.

        The deformation is resampled as a displacement from the identity grid,
        so identity stays identity up to the border pixels.
        """
        size = (size, size) if isinstance(size, int) else tuple(size)
        if tuple(self.occlusion.shape[-2:]) == size:
            return self
        b, h, w, _ = self.deformation.shape
        kw = dict(dtype=self.deformation.dtype, device=self.deformation.device)
        disp = self.deformation - make_coordinate_grid(h, w, **kw)
        disp = F.interpolate(disp.permute(0, 3, 1, 2), size=size,
                             mode="bilinear", align_corners=False).permute(0, 2, 3, 1)
        deformation = disp + make_coordinate_grid(*size, **kw)
        occlusion = F.interpolate(self.occlusion, size=size, mode="bilinear", align_corners=False)
        attention = F.interpolate(self.attention, size=size, mode="bilinear", align_corners=False)
        return MotionField(deformation, occlusion, attention, self.sparse, self.sparse_deformed)


def warp(inp: torch.Tensor, deformation: torch.Tensor) -> torch.Tensor:
    """Backward-warp (B, C, H, W) features with a (B, H', W', 2) sampling grid.

    Bilinear interpolation, border clamping for samples outside [-1, 1]^2.
    """
    squeeze = inp.ndim == 3
    if squeeze:
        inp, deformation = inp[None], deformation[None]
    out = F.grid_sample(inp, deformation.to(inp.dtype), mode="bilinear",
                        padding_mode="border", align_corners=False)
    return out[0] if squeeze else out


def identity_grid(batch, size, dtype=torch.float32, device=None):
    h, w = (size, size) if isinstance(size, int) else size
    return make_coordinate_grid(h, w, dtype=dtype, device=device).expand(batch, h, w, 2)


def sparse_motion(src_kp: KeypointSet, drv_kp: KeypointSet, grid_resolution) -> SparseMotion:
    """z -> u_src + J_src J_drv^{-1} (z - u_drv) per keypoint, plus identity."""
    h, w = (grid_resolution, grid_resolution) if isinstance(grid_resolution, int) else grid_resolution
    coords_d, coords_s = drv_kp.coords, src_kp.coords
    if coords_d.shape != coords_s.shape:
        raise ValueError("source and driving keypoint sets differ in shape")
    b, n, _ = coords_d.shape
    det = torch.linalg.det(drv_kp.jacobians.detach())
    bad = (det.abs() <= DET_THRESHOLD).nonzero()
    if len(bad):
        raise SingularJacobianError(
            f"driving Jacobian of keypoint {int(bad[0, 1])} is near-singular (|det| <= {DET_THRESHOLD})")
    grid = make_coordinate_grid(h, w, dtype=coords_d.dtype, device=coords_d.device)
    rel = grid.view(1, 1, h, w, 2) - coords_d.view(b, n, 1, 1, 2)
    jac = src_kp.jacobians @ torch.linalg.inv(drv_kp.jacobians)
    moved = torch.einsum("bnij,bnhwj->bnhwi", jac, rel) + coords_s.view(b, n, 1, 1, 2)
    ident = grid.view(1, 1, h, w, 2).expand(b, 1, h, w, 2)
    return SparseMotion(torch.cat([ident, moved], dim=1))


def keypoint_gaussians(coords: torch.Tensor, size, sigma: float) -> torch.Tensor:
    """Peak-one Gaussian bumps (B, N, H, W) centred on each keypoint."""
    h, w = (size, size) if isinstance(size, int) else size
    grid = make_coordinate_grid(h, w, dtype=coords.dtype, device=coords.device)
    sq = ((grid - coords[:, :, None, None, :]) ** 2).sum(-1)
    return torch.exp(-sq / (2 * sigma ** 2))


def check_motion_field(field: MotionField, atol=1e-5):
    occ = field.occlusion.detach()
    assert occ.min() >= 0 and occ.max() <= 1, "occlusion outside [0, 1]"
    total = field.attention.detach().sum(1)
    assert torch.allclose(total, torch.ones_like(total), atol=atol), "attention does not sum to 1"
    if field.sparse is not None:
        combo = (field.attention[..., None] * field.sparse.grids).sum(1)
        assert torch.allclose(combo.detach(), field.deformation.detach(), atol=atol), \
            "deformation is not the attention-weighted sparse motion"


class DenseMotionNetwork(nn.Module):
    """Predicts attention over the N+1 sparse motions and an occlusion map."""

    def __init__(self, config: DenseMotionConfig, num_keypoints: int, num_channels=3):
        super().__init__()
        self.config = config
        self.num_keypoints = num_keypoints
        self.num_channels = num_channels
        self.down = AntiAliasInterpolation2d(num_channels, config.scale_factor)
        in_features = (num_keypoints + 1) * (num_channels + 1)
        self.hourglass = Hourglass(in_features, config.block_expansion, config.num_blocks,
                                   config.max_features)
        self.mask = nn.Conv2d(self.hourglass.out_filters, num_keypoints + 1, 7, padding=3)
        self.occlusion = nn.Conv2d(self.hourglass.out_filters, 1, 7, padding=3)

    def grid_size(self, resolution: int) -> int:
        return round(resolution * self.config.scale_factor)

    def forward(self, source: torch.Tensor, src_kp: KeypointSet, drv_kp: KeypointSet,
                sparse: Optional[SparseMotion] = None, force_slot: Optional[int] = None) -> MotionField:
        small = self.down(source)
        b, c, h, w = small.shape
        if sparse is None:
            sparse = sparse_motion(src_kp, drv_kp, (h, w))
        if tuple(sparse.grids.shape[2:4]) != (h, w):
            raise ValueError(
                f"sparse motion at {tuple(sparse.grids.shape[2:4])} does not match source grid {(h, w)}")
        n1 = sparse.num_motions
        if n1 != self.num_keypoints + 1:
            raise ValueError(f"expected {self.num_keypoints + 1} motions, got {n1}")

        heat = (keypoint_gaussians(drv_kp.coords, (h, w), self.config.kp_sigma)
                - keypoint_gaussians(src_kp.coords, (h, w), self.config.kp_sigma))
        heat = torch.cat([torch.zeros_like(heat[:, :1]), heat], dim=1)

        repeated = small[:, None].expand(b, n1, c, h, w).reshape(b * n1, c, h, w)
        deformed = warp(repeated, sparse.grids.reshape(b * n1, h, w, 2)).view(b, n1, c, h, w)

        net_in = torch.cat([heat[:, :, None], deformed], dim=2).view(b, -1, h, w)
        feats = self.hourglass(net_in)
        attention = F.softmax(self.mask(feats), dim=1)
        if force_slot is not None:
            attention = F.one_hot(torch.full_like(attention[:, 0], force_slot, dtype=torch.long),
                                  n1).permute(0, 3, 1, 2).to(attention.dtype)
        deformation = (attention[..., None] * sparse.grids).sum(1)
        occlusion = torch.sigmoid(self.occlusion(feats))
        field = MotionField(deformation, occlusion, attention, sparse, deformed)
        if DEBUG:
            check_motion_field(field)
        return field


def dense_motion(network: DenseMotionNetwork, source, sparse: SparseMotion, src_kp, drv_kp) -> MotionField:
    return network(source, src_kp, drv_kp, sparse=sparse)
