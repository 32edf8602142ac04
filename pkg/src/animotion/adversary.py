"""PatchGAN discriminator returning a raw patch score map and the
intermediate activations used for feature matching."""
from dataclasses import dataclass
from typing import List

import torch
import torch.nn.functional as F
from torch import nn

from .config import DiscriminatorConfig


@dataclass
class DiscriminatorOutput:
    patch_map: torch.Tensor
    features: List[torch.Tensor]


class PatchDiscriminator(nn.Module):
    """70x70 PatchGAN: four 4x4 conv blocks (strides 2-2-2-1) and a 1-channel head.

    No sigmoid on the head; the least-squares objective consumes raw scores.
    """

    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig(), num_channels=3):
        super().__init__()
        self.blocks = nn.ModuleList()
        cin = num_channels
        for i in range(config.num_layers):
            cout = min(config.max_features, config.block_expansion * 2 ** i)
            stride = 1 if i == config.num_layers - 1 else 2
            norm = config.use_instance_norm and i > 0
            self.blocks.append(nn.ModuleDict({
                "conv": nn.Conv2d(cin, cout, 4, stride=stride, padding=1),
                "norm": nn.InstanceNorm2d(cout, affine=True) if norm else nn.Identity(),
            }))
            cin = cout
        self.head = nn.Conv2d(cin, 1, 4, stride=1, padding=1)

    def forward(self, frame: torch.Tensor) -> DiscriminatorOutput:
        features = []
        out = frame
        for block in self.blocks:
            out = F.leaky_relu(block["norm"](block["conv"](out)), 0.2)
            features.append(out)
        return DiscriminatorOutput(self.head(out), features)


def discriminate(discriminator: PatchDiscriminator, frame) -> DiscriminatorOutput:
    return discriminator(frame)


def patch_map_size(size: int, num_layers: int = 4) -> int:
    """Spatial side of the patch map for a square input of side ``size``."""
    for i in range(num_layers):
        stride = 1 if i == num_layers - 1 else 2
        size = (size + 2 - 4) // stride + 1
    return size + 2 - 4 + 1
