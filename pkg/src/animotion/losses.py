"""Training objectives: equivariance, heatmap supervision, multi-resolution
L1 and perceptual reconstruction, least-squares GAN and feature matching."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .adversary import DiscriminatorOutput
from .config import LossWeights
from .keypoints import KeypointSet, gaussian_heatmap
from .motion import DET_THRESHOLD, SingularJacobianError

COMPONENTS = ("eq1", "eq2", "key", "rec_l1", "rec_perc", "gan_g", "gan_d", "feat")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component, value=None):
        super().__init__(f"non-finite loss component {component!r}: {value}")
        self.component = component


class ExtractorUnavailable(RuntimeError):
    pass


@dataclass
class LossReport:
    eq1: float = 0.0
    eq2: float = 0.0
    key: float = 0.0
    rec_l1: float = 0.0
    rec_perc: float = 0.0
    gan_g: float = 0.0
    gan_d: float = 0.0
    feat: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    def as_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out

    def detached(self) -> "LossReport":
        return LossReport(**self.as_dict())


@dataclass
class PyramidSpec:
    scales: Sequence[int] = (256, 128, 64, 32)

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        if not self.scales:
            raise ValueError("pyramid needs at least one scale")
        for a, b in zip(self.scales, self.scales[1:]):
            if b * 2 != a:
                raise ValueError(f"pyramid scales must halve at each level, got {self.scales}")

    def factors(self):
        return [self.scales[0] // s for s in self.scales]


def pyramid(image: torch.Tensor, spec: PyramidSpec) -> List[torch.Tensor]:
    """Average-pooled copies of ``image``, one per pyramid level."""
    return [image if f == 1 else F.avg_pool2d(image, f) for f in spec.factors()]


# --------------------------------------------------------------------------- keypoints

def _per_sample(tps, b):
    if isinstance(tps, (list, tuple)):
        if len(tps) != b:
            raise ValueError(f"expected {b} transforms, got {len(tps)}")
        return list(tps)
    return [tps] * b


def equivariance_loss(kp_x: KeypointSet, kp_y: KeypointSet, tps, include_sup: bool = False):
    """Displacement and Jacobian equivariance residuals ``(eq1, eq2)``.

    ``kp_y`` comes from the frame ``Y(z) = X(tps(z))``; ``tps`` may be one
    transform or a per-sample list.
    """
    x, y = kp_x.select(include_sup), kp_y.select(include_sup)
    b, n, _ = x.coords.shape
    transforms = _per_sample(tps, b)
    mapped = torch.stack([t(y.coords[i]) for i, t in enumerate(transforms)])
    eq1 = (x.coords - mapped).abs().sum(-1).mean()

    det = torch.linalg.det(x.jacobians.detach())
    bad = (det.abs() <= DET_THRESHOLD).nonzero()
    if len(bad):
        raise SingularJacobianError(f"Jacobian of keypoint {int(bad[0, 1])} in X is near-singular")
    tps_jac = torch.stack([t.jacobian(y.coords[i]) for i, t in enumerate(transforms)])
    prod = torch.linalg.inv(x.jacobians) @ tps_jac @ y.jacobians
    eye = torch.eye(2, dtype=prod.dtype, device=prod.device)
    eq2 = (eye - prod).abs().sum(dim=(-2, -1)).mean()
    return eq1, eq2


def keypoint_supervision_loss(predicted_heatmaps: torch.Tensor, gt_points: torch.Tensor, sigma: float):
    """Mean squared error between predicted heatmaps and Gaussian targets."""
    gt_points = torch.as_tensor(gt_points, dtype=predicted_heatmaps.dtype, device=predicted_heatmaps.device)
    target = gaussian_heatmap(gt_points, tuple(predicted_heatmaps.shape[-2:]), sigma)
    return ((predicted_heatmaps - target) ** 2).mean()


# --------------------------------------------------------------------------- reconstruction

def reconstruction_l1(driving, content, spec: PyramidSpec):
    if driving.shape != content.shape:
        raise ValueError("driving and content must have equal shapes")
    return sum((d - c).abs().mean() for d, c in zip(pyramid(driving, spec), pyramid(content, spec)))


def reconstruction_perceptual(driving, final, spec: PyramidSpec, extractor: Optional[Callable]):
    if extractor is None:
        raise ExtractorUnavailable(
            "no perceptual extractor; use RandomConvExtractor (perceptual: random) for hermetic runs")
    total = 0.0
    for d, g in zip(pyramid(driving, spec), pyramid(final, spec)):
        for fd, fg in zip(extractor(d), extractor(g)):
            total = total + (fd - fg).abs().mean()
    return total


class IdentityExtractor(nn.Module):
    def forward(self, x):
        return [x]


class RandomConvExtractor(nn.Module):
    """Frozen four-stage conv net with weights drawn from a fixed seed."""

    def __init__(self, num_channels=3, seed=0, widths=(16, 32, 64, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.stages = nn.ModuleList()
        cin = num_channels
        for cout in widths:
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            with torch.no_grad():
                bound = math.sqrt(6.0 / (cin * 9))
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * bound)
                conv.bias.zero_()
            self.stages.append(conv)
            cin = cout
        self.seed = seed
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        out = x
        for i, conv in enumerate(self.stages):
            if i > 0:
                out = F.avg_pool2d(out, 2) if min(out.shape[-2:]) >= 2 else out
            out = F.relu(conv(out))
            feats.append(out)
        return feats


class Vgg19Extractor(nn.Module):
    """Pretrained VGG-19 activations relu1_1, relu2_1, relu3_1, relu4_1."""

    def __init__(self):
        super().__init__()
        try:
            from torchvision.models import VGG19_Weights, vgg19
            layers = vgg19(weights=VGG19_Weights.DEFAULT).features
        except Exception as exc:  # noqa: BLE001 - any import/download failure
            raise ExtractorUnavailable(
                f"pretrained VGG-19 unavailable ({exc}); set train.perceptual: random to use the "
                "fixed-seed fallback extractor") from exc
        cuts = [2, 7, 12, 21]
        self.slices = nn.ModuleList(layers[a:b] for a, b in zip([0] + cuts[:-1], cuts))
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)

    def forward(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        out = (x - self.mean) / self.std
        feats = []
        for s in self.slices:
            out = s(out)
            feats.append(out)
        return feats


def make_extractor(kind: str, num_channels: int, seed: int = 0):
    if kind == "random":
        return RandomConvExtractor(num_channels, seed=seed)
    if kind == "vgg19":
        return Vgg19Extractor()
    if kind == "identity":
        return IdentityExtractor()
    raise ValueError(f"unknown perceptual extractor {kind!r}")


# --------------------------------------------------------------------------- adversarial

def lsgan_losses(dis_real: DiscriminatorOutput, dis_fake: DiscriminatorOutput,
                 dis_fake_for_g: DiscriminatorOutput):
    gan_g = ((dis_fake_for_g.patch_map - 1) ** 2).mean()
    gan_d = ((dis_real.patch_map - 1) ** 2).mean() + (dis_fake.patch_map ** 2).mean()
    return gan_g, gan_d


def lsgan_generator_loss(dis_fake: DiscriminatorOutput):
    return ((dis_fake.patch_map - 1) ** 2).mean()


def lsgan_discriminator_loss(dis_real: DiscriminatorOutput, dis_fake: DiscriminatorOutput):
    return ((dis_real.patch_map - 1) ** 2).mean() + (dis_fake.patch_map ** 2).mean()


def feature_matching(dis_real: DiscriminatorOutput, dis_fake: DiscriminatorOutput):
    if len(dis_real.features) != len(dis_fake.features):
        raise ValueError("feature lists differ in length")
    return sum((r.detach() - f).abs().mean() for r, f in zip(dis_real.features, dis_fake.features))


# --------------------------------------------------------------------------- weighting

def _check_finite(name, value):
    v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not math.isfinite(v):
        raise NonFiniteLossError(name, v)


def total(components: dict, weights: LossWeights = LossWeights()) -> LossReport:
    """Weighted generator-side and discriminator totals.

    Missing components count as zero.  Values may be floats or tensors; the
    totals keep whatever type the components have, so they can be
    back-propagated.
    """
    comp = {name: components.get(name, 0.0) for name in COMPONENTS}
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise KeyError(f"unknown loss components {sorted(unknown)}")
    for name, value in comp.items():
        _check_finite(name, value)
    total_g = (weights.eq * (comp["eq1"] + comp["eq2"])
               + weights.key * comp["key"]
               + weights.rec_l1 * comp["rec_l1"]
               + weights.rec_perc * comp["rec_perc"]
               + weights.gan_g * comp["gan_g"]
               + weights.feat * comp["feat"])
    total_d = weights.gan_d * comp["gan_d"]
    return LossReport(**comp, total_g=total_g, total_d=total_d)
