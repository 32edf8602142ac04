"""Shared network blocks and coordinate helpers."""
import torch
import torch.nn.functional as F
from torch import nn


def make_coordinate_grid(height, width, dtype=torch.float32, device=None):
    """Pixel-center grid in normalized [-1, 1] coordinates.

    Returns an (H, W, 2) tensor holding (x, y); pixel ``i`` of an axis of
    length ``n`` sits at ``-1 + (2 i + 1) / n``, which is the
    ``align_corners=False`` convention of :func:`torch.nn.functional.grid_sample`.
    """
    x = (2 * torch.arange(width, dtype=dtype, device=device) + 1) / width - 1
    y = (2 * torch.arange(height, dtype=dtype, device=device) + 1) / height - 1
    yy, xx = torch.meshgrid(y, x, indexing="ij")
    return torch.stack([xx, yy], dim=-1)


class ResBlock2d(nn.Module):
    """Two 3x3 convolutions with a residual connection."""

    def __init__(self, features):
        super().__init__()
        self.conv1 = nn.Conv2d(features, features, 3, padding=1)
        self.conv2 = nn.Conv2d(features, features, 3, padding=1)
        self.norm1 = nn.BatchNorm2d(features)
        self.norm2 = nn.BatchNorm2d(features)

    def forward(self, x):
        out = self.conv1(F.relu(self.norm1(x)))
        out = self.conv2(F.relu(self.norm2(out)))
        return x + out


class DownBlock2d(nn.Module):
    def __init__(self, in_features, out_features):
        super().__init__()
        self.conv = nn.Conv2d(in_features, out_features, 3, padding=1)
        self.norm = nn.BatchNorm2d(out_features)

    def forward(self, x):
        return F.avg_pool2d(F.relu(self.norm(self.conv(x))), 2)


class UpBlock2d(nn.Module):
    def __init__(self, in_features, out_features):
        super().__init__()
        self.conv = nn.Conv2d(in_features, out_features, 3, padding=1)
        self.norm = nn.BatchNorm2d(out_features)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.relu(self.norm(self.conv(x)))


class SameBlock2d(nn.Module):
    def __init__(self, in_features, out_features, kernel_size=3):
        super().__init__()
        self.conv = nn.Conv2d(in_features, out_features, kernel_size, padding=kernel_size // 2)
        self.norm = nn.BatchNorm2d(out_features)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class Hourglass(nn.Module):
    """U-Net with ``num_blocks`` downsampling and upsampling blocks."""

    def __init__(self, in_features, block_expansion=64, num_blocks=5, max_features=512):
        super().__init__()
        self.down_blocks = nn.ModuleList()
        for i in range(num_blocks):
            cin = in_features if i == 0 else min(max_features, block_expansion * 2 ** i)
            cout = min(max_features, block_expansion * 2 ** (i + 1))
            self.down_blocks.append(DownBlock2d(cin, cout))

        self.up_blocks = nn.ModuleList()
        for i in reversed(range(num_blocks)):
            cin = (1 if i == num_blocks - 1 else 2) * min(max_features, block_expansion * 2 ** (i + 1))
            cout = min(max_features, block_expansion * 2 ** i)
            self.up_blocks.append(UpBlock2d(cin, cout))

        self.out_filters = block_expansion + in_features
        self.num_blocks = num_blocks

    def forward(self, x):
        if x.shape[-1] % (2 ** self.num_blocks) or x.shape[-2] % (2 ** self.num_blocks):
            raise ValueError(
                f"input {tuple(x.shape[-2:])} not divisible by 2**{self.num_blocks}")
        skips = [x]
        for block in self.down_blocks:
            skips.append(block(skips[-1]))
        out = skips.pop()
        for block in self.up_blocks:
            out = block(out)
            out = torch.cat([out, skips.pop()], dim=1)
        return out


class AntiAliasInterpolation2d(nn.Module):
    """Gaussian blur followed by center-aligned downsampling."""

    def __init__(self, channels, scale):
        super().__init__()
        sigma = (1 / scale - 1) / 2
        kernel_size = 2 * round(sigma * 4) + 1
        self.ka = kernel_size // 2
        self.kb = self.ka - 1 if kernel_size % 2 == 0 else self.ka
        coords = torch.arange(kernel_size, dtype=torch.float32) - (kernel_size - 1) / 2
        g = torch.exp(-coords ** 2 / (2 * sigma ** 2)) if sigma > 0 else (coords == 0).float()
        g = g / g.sum()
        kernel = torch.outer(g, g).expand(channels, 1, kernel_size, kernel_size).contiguous()
        self.register_buffer("weight", kernel)
        self.groups = channels
        self.scale = scale

    def forward(self, x):
        if self.scale == 1.0:
            return x
        out = F.pad(x, (self.ka, self.kb, self.ka, self.kb), mode="replicate")
        out = F.conv2d(out, self.weight.to(x.dtype), groups=self.groups)
        # bilinear resampling keeps output pixel centers aligned with the input's
        size = (round(x.shape[-2] * self.scale), round(x.shape[-1] * self.scale))
        return F.interpolate(out, size=size, mode="bilinear", align_corners=False)
