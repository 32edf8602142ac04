"""Dual-decoder generator: one encoder and bottleneck, separate content and
texture decoders, final frame = content + texture."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import GeneratorConfig
from .layers import DownBlock2d, ResBlock2d, SameBlock2d, UpBlock2d
from .motion import MotionField, warp


@dataclass
class GeneratorOutput:
    content: torch.Tensor
    texture: torch.Tensor
    final: torch.Tensor
    deformed_source: torch.Tensor = None
    occlusion: torch.Tensor = None


def recompose(content, texture):
    return content + texture


def split_outputs(out: GeneratorOutput):
    """(content, texture, final) for routing content-L1 vs final-frame losses."""
    return out.content, out.texture, out.final


def reinject(features: torch.Tensor, motion: MotionField) -> torch.Tensor:
    """Warp ``features`` by the deformation, then mask by occlusion, both
    resampled to the feature resolution."""
    m = motion.resized(features.shape[-2:])
    return warp(features, m.deformation) * m.occlusion


class Decoder(nn.Module):
    def __init__(self, enc_channels, out_channels, activation):
        super().__init__()
        depth = len(enc_channels) - 1
        stream = enc_channels[-1]
        self.up_blocks = nn.ModuleList()
        for j in range(depth, 0, -1):
            self.up_blocks.append(UpBlock2d(stream + enc_channels[j], enc_channels[j - 1]))
            stream = enc_channels[j - 1]
        self.final = nn.Conv2d(stream + enc_channels[0], out_channels, 7, padding=3)
        self.activation = activation

    def forward(self, x, skips, motion):
        # skips are ordered fine -> coarse; the coarsest is consumed first
        for block, skip in zip(self.up_blocks, reversed(skips[1:])):
            x = block(torch.cat([x, reinject(skip, motion)], dim=1))
        x = self.final(torch.cat([x, reinject(skips[0], motion)], dim=1))
        return self.activation(x)


class DualDecoderGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig, num_channels=3):
        super().__init__()
        self.config = config
        be, mx, depth = config.block_expansion, config.max_features, config.num_down_blocks
        enc = [be] + [min(mx, be * 2 ** (i + 1)) for i in range(depth)]
        self.first = SameBlock2d(num_channels, be, kernel_size=7)
        self.down_blocks = nn.ModuleList(DownBlock2d(enc[i], enc[i + 1]) for i in range(depth))
        self.bottleneck = nn.Sequential(*[ResBlock2d(enc[-1]) for _ in range(config.num_bottleneck_blocks)])
        self.content_decoder = Decoder(enc, num_channels, torch.sigmoid)
        self.texture_decoder = Decoder(enc, num_channels, torch.tanh) if config.use_texture else None
        self.num_channels = num_channels

    def encode(self, source):
        skips = [self.first(source)]
        for block in self.down_blocks:
            skips.append(block(skips[-1]))
        return skips

    def forward(self, source: torch.Tensor, motion: MotionField) -> GeneratorOutput:
        size = source.shape[-1]
        mres = motion.deformation.shape[1]
        if motion.deformation.shape[0] != source.shape[0] or size % mres or source.shape[-2] != size:
            raise ValueError(
                f"motion field {tuple(motion.deformation.shape)} incompatible with source {tuple(source.shape)}")
        skips = self.encode(source)
        trunk = self.bottleneck(reinject(skips[-1], motion))
        content = self.content_decoder(trunk, skips, motion)
        if self.texture_decoder is not None:
            texture = self.texture_decoder(trunk, skips, motion)
        else:
            texture = torch.zeros_like(content)
        full = motion.resized(source.shape[-2:])
        return GeneratorOutput(
            content=content,
            texture=texture,
            final=recompose(content, texture),
            deformed_source=warp(source, full.deformation).detach(),
            occlusion=full.occlusion,
        )


def generate(generator: DualDecoderGenerator, source, motion: MotionField) -> GeneratorOutput:
    return generator(source, motion)
