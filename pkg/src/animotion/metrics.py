"""Evaluation metrics: L1, PSNR, FID, LPIPS-style distance and FVD.

FID, LPIPS and FVD depend on a feature embedder.  Paper-comparable numbers
need the standard pretrained networks; the fixed-seed fallback embedders
make the suite hermetic, and every report records which kind was used.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import SCHEMA_VERSION
from .dataset import VideoClip, clip_to_tensor

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0


class EmbedderUnavailable(RuntimeError):
    pass


# --------------------------------------------------------------------------- pixel metrics

def _as_array(x):
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def l1_psnr(pairs):
    """Mean absolute error and mean per-frame PSNR (peak 1) over (real, fake) pairs.

    Identical frames count as ``PSNR_CAP`` dB.
    """
    abs_sum, count, psnrs = 0.0, 0, []
    for real, fake in pairs:
        real, fake = _as_array(real), _as_array(fake)
        if real.shape != fake.shape:
            raise ValueError(f"shape mismatch {real.shape} vs {fake.shape}")
        diff = real - fake
        abs_sum += np.abs(diff).sum()
        count += diff.size
        mse = np.mean(diff ** 2)
        psnrs.append(PSNR_CAP if mse == 0 else min(PSNR_CAP, 10 * np.log10(1.0 / mse)))
    if not psnrs:
        raise ValueError("no frame pairs given")
    return abs_sum / count, float(np.mean(psnrs))


# --------------------------------------------------------------------------- Frechet distance

def _drop_roundoff(w):
    # eigenvalues within round-off of zero would otherwise add sqrt(eps)-sized noise
    tol = len(w) * np.finfo(np.float64).eps * max(np.abs(w).max(initial=0), 1e-300)
    return np.where(np.abs(w) <= tol, 0.0, w)


def _sqrtm_psd(mat):
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v * np.sqrt(np.clip(_drop_roundoff(w), 0, None))) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}).

    The trace term uses the eigenvalues of the symmetric matrix
    ``S1^{1/2} S2 S1^{1/2}``, which share the spectrum of ``S1 S2``.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    root1 = _sqrtm_psd(sigma1)
    inner = root1 @ sigma2 @ root1
    eig = _drop_roundoff(np.linalg.eigvalsh((inner + inner.T) / 2))
    if eig.min(initial=0) < -1e-6:
        logger.warning("covariance product has eigenvalue %.3g < -1e-6; clipping", eig.min())
    trace_sqrt = np.sqrt(np.clip(eig, 0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2 * trace_sqrt)


def _stats(embeds):
    embeds = np.asarray(embeds, dtype=np.float64)
    if embeds.ndim == 1:
        embeds = embeds[:, None]
    if len(embeds) < 2:
        raise ValueError("need at least 2 embeddings per side")
    return embeds.mean(0), np.atleast_2d(np.cov(embeds, rowvar=False)), embeds.shape[1]


def fid(real_embeds, fake_embeds) -> float:
    mu_r, cov_r, d_r = _stats(real_embeds)
    mu_f, cov_f, d_f = _stats(fake_embeds)
    if d_r != d_f:
        raise ValueError(f"embedding dimensionality mismatch: {d_r} vs {d_f}")
    return frechet_distance(mu_r, cov_r, mu_f, cov_f)


# --------------------------------------------------------------------------- embedders

@dataclass
class EmbedderHandle:
    name: str
    dim: int
    kind: str            # "image-embedder" | "video-embedder"
    provenance: str      # "pretrained" | "fixed-seed-fallback"
    module: nn.Module = field(repr=False)
    seed: Optional[int] = None

    def stamp(self):
        return {"name": self.name, "dim": self.dim, "kind": self.kind,
                "provenance": self.provenance, "seed": self.seed}

    @torch.no_grad()
    def embed(self, x: torch.Tensor) -> np.ndarray:
        return self.module(x.float()).double().cpu().numpy()

    @torch.no_grad()
    def layers(self, x: torch.Tensor) -> List[torch.Tensor]:
        return self.module.layers(x.float())


class RandomImageNet(nn.Module):
    """Frozen random conv stack; leaky activations keep it injective-ish."""

    def __init__(self, num_channels, seed, widths=(16, 32, 64, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        cin = num_channels
        for cout in widths:
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * np.sqrt(2.0 / (cin * 9)))
                conv.bias.copy_(torch.randn(cout, generator=gen) * 0.1)
            self.convs.append(conv)
            cin = cout
        self.dim = sum(widths)
        self.requires_grad_(False)
        self.eval()

    def layers(self, x):
        feats = []
        out = x
        for i, conv in enumerate(self.convs):
            if i > 0 and min(out.shape[-2:]) >= 2:
                out = F.avg_pool2d(out, 2)
            out = F.leaky_relu(conv(out), 0.2)
            feats.append(out)
        return feats

    def forward(self, x):
        return torch.cat([f.mean(dim=(-2, -1)) for f in self.layers(x)], dim=1)


class RandomVideoNet(nn.Module):
    """Frozen random spatio-temporal conv stack over (B, C, T, H, W) clips."""

    def __init__(self, num_channels, seed, widths=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        cin = num_channels
        for cout in widths:
            conv = nn.Conv3d(cin, cout, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * np.sqrt(2.0 / (cin * 27)))
                conv.bias.copy_(torch.randn(cout, generator=gen) * 0.1)
            self.convs.append(conv)
            cin = cout
        self.dim = sum(widths)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        feats = []
        out = x
        for i, conv in enumerate(self.convs):
            if i > 0:
                out = F.avg_pool3d(out, (1, 2, 2))
            out = F.leaky_relu(conv(out), 0.2)
            feats.append(out.mean(dim=(-3, -2, -1)))
        return torch.cat(feats, dim=1)


class FrameMeanVideoNet(nn.Module):
    """Video embedding = mean of per-frame image embeddings (ignores order)."""

    def __init__(self, image_net: nn.Module):
        super().__init__()
        self.image_net = image_net
        self.dim = image_net.dim

    def forward(self, x):
        b, c, t, h, w = x.shape
        frames = x.permute(0, 2, 1, 3, 4).reshape(b * t, c, h, w)
        return self.image_net(frames).view(b, t, -1).mean(1)


def fallback_image_embedder(num_channels=1, seed=1234) -> EmbedderHandle:
    net = RandomImageNet(num_channels, seed)
    return EmbedderHandle("random-conv-image", net.dim, "image-embedder", "fixed-seed-fallback", net, seed)


def fallback_video_embedder(num_channels=1, seed=1234) -> EmbedderHandle:
    net = RandomVideoNet(num_channels, seed)
    return EmbedderHandle("random-conv3d-video", net.dim, "video-embedder", "fixed-seed-fallback", net, seed)


def frame_mean_video_embedder(image: EmbedderHandle) -> EmbedderHandle:
    net = FrameMeanVideoNet(image.module)
    return EmbedderHandle(f"frame-mean[{image.name}]", net.dim, "video-embedder", image.provenance,
                          net, image.seed)


class _PretrainedImage(nn.Module):
    def __init__(self):
        super().__init__()
        from torchvision.models import Inception_V3_Weights, inception_v3
        net = inception_v3(weights=Inception_V3_Weights.DEFAULT, aux_logits=True)
        net.fc = nn.Identity()
        net.eval()
        self.net = net
        self.dim = 2048
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)

    def _prep(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        return (x - self.mean) / self.std

    def layers(self, x):
        n = self.net
        out = self._prep(x)
        feats = []
        for stage in ([n.Conv2d_1a_3x3, n.Conv2d_2a_3x3, n.Conv2d_2b_3x3],
                      [n.maxpool1, n.Conv2d_3b_1x1, n.Conv2d_4a_3x3],
                      [n.maxpool2, n.Mixed_5b, n.Mixed_5c, n.Mixed_5d],
                      [n.Mixed_6a, n.Mixed_6b]):
            for layer in stage:
                out = layer(out)
            feats.append(out)
        return feats

    def forward(self, x):
        return self.net(self._prep(x))


class _PretrainedVideo(nn.Module):
    def __init__(self):
        super().__init__()
        from torchvision.models.video import R3D_18_Weights, r3d_18
        net = r3d_18(weights=R3D_18_Weights.DEFAULT)
        net.fc = nn.Identity()
        net.eval()
        self.net = net
        self.dim = 512
        self.requires_grad_(False)

    def forward(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1, -1)
        return self.net(x)


def pretrained_image_embedder() -> EmbedderHandle:
    try:
        net = _PretrainedImage()
    except Exception as exc:  # noqa: BLE001 - missing package or weights download
        raise EmbedderUnavailable(
            f"pretrained Inception-v3 unavailable ({exc}); use the fixed-seed fallback embedder") from exc
    return EmbedderHandle("inception-v3", net.dim, "image-embedder", "pretrained", net)


def pretrained_video_embedder() -> EmbedderHandle:
    try:
        net = _PretrainedVideo()
    except Exception as exc:  # noqa: BLE001
        raise EmbedderUnavailable(
            f"pretrained video network unavailable ({exc}); use the fixed-seed fallback embedder") from exc
    return EmbedderHandle("r3d-18", net.dim, "video-embedder", "pretrained", net)


def make_embedders(kind: str, num_channels: int, seed: int = 1234):
    if kind == "fallback":
        return fallback_image_embedder(num_channels, seed), fallback_video_embedder(num_channels, seed)
    if kind == "pretrained":
        return pretrained_image_embedder(), pretrained_video_embedder()
    raise ValueError(f"unknown embedder kind {kind!r}")


# --------------------------------------------------------------------------- perceptual / video

def _to_batch(img):
    """Tensors are (C, H, W) or (B, C, H, W); numpy arrays are (H, W, C) frames."""
    if isinstance(img, torch.Tensor):
        return (img[None] if img.ndim == 3 else img).float()
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1)[None]


def perceptual_distance(real, fake, embedder: EmbedderHandle, eps=1e-10) -> float:
    """LPIPS construction with uniform layer weights over the embedder's layers:
    channel-normalized activations, squared difference summed over channels,
    averaged spatially, summed over layers."""
    real, fake = _to_batch(real), _to_batch(fake)
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch {tuple(real.shape)} vs {tuple(fake.shape)}")
    total = torch.zeros(real.shape[0], dtype=torch.float64)
    for fr, ff in zip(embedder.layers(real), embedder.layers(fake)):
        nr = fr / (fr.norm(dim=1, keepdim=True) + eps)
        nf = ff / (ff.norm(dim=1, keepdim=True) + eps)
        total += ((nr - nf) ** 2).sum(1).mean(dim=(-2, -1)).double()
    return float(total.mean())


def fit_length(frames: torch.Tensor, length: int) -> torch.Tensor:
    """Center-crop or last-frame-pad a (T, ...) clip to ``length`` frames."""
    t = len(frames)
    if t >= length:
        start = (t - length) // 2
        return frames[start:start + length]
    pad = frames[-1:].expand(length - t, *frames.shape[1:])
    return torch.cat([frames, pad])


def embed_clips(clips: Sequence, video_embedder: EmbedderHandle, length: int = 16) -> np.ndarray:
    out = []
    for clip in clips:
        frames = clip_to_tensor(clip) if isinstance(clip, VideoClip) else torch.as_tensor(clip)
        frames = fit_length(frames, length)            # (T, C, H, W)
        out.append(video_embedder.embed(frames.permute(1, 0, 2, 3)[None])[0])
    return np.stack(out)


def fvd(real_clips, fake_clips, video_embedder: EmbedderHandle, length: int = 16) -> float:
    if len(real_clips) < 2 or len(fake_clips) < 2:
        raise ValueError("FVD needs at least 2 clips per side")
    return fid(embed_clips(real_clips, video_embedder, length), embed_clips(fake_clips, video_embedder, length))


def embed_frames(clips: Sequence[VideoClip], image_embedder: EmbedderHandle, chunk=64) -> np.ndarray:
    out = []
    for clip in clips:
        frames = clip_to_tensor(clip)
        for start in range(0, len(frames), chunk):
            out.append(image_embedder.embed(frames[start:start + chunk]))
    return np.concatenate(out)


# --------------------------------------------------------------------------- reports

@dataclass
class MetricReport:
    l1: Optional[float] = None
    psnr: Optional[float] = None
    fid: Optional[float] = None
    lpips: Optional[float] = None
    fvd: Optional[float] = None
    prediction_fid: Optional[float] = None
    prediction_fvd: Optional[float] = None
    per_clip: List[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    config: Optional[dict] = None

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def table(self) -> str:
        def fmt(v, spec):
            return "-" if v is None else format(v, spec)

        tag = ", ".join(f"{k}: {v['provenance']}" for k, v in self.provenance.items())
        head = f"{'':<10}| {'Reconstruction':^46} | {'Prediction':^19}"
        cols = (f"{'':<10}| {'L1':>8} {'FID':>8} {'LPIPS':>8} {'PSNR':>8} {'FVD':>9} "
                f"| {'FID':>8} {'FVD':>9}")
        row = (f"{'model':<10}| {fmt(self.l1, '8.4f')} {fmt(self.fid, '8.2f')} {fmt(self.lpips, '8.4f')} "
               f"{fmt(self.psnr, '8.2f')} {fmt(self.fvd, '9.2f')} "
               f"| {fmt(self.prediction_fid, '8.2f')} {fmt(self.prediction_fvd, '9.2f')}")
        lines = [head, cols, "-" * len(cols), row]
        if tag:
            lines.append(f"embedders: {tag}")
        return "\n".join(lines)


def evaluate_reconstruction(real_clips: Sequence[VideoClip], fake_clips: Sequence[VideoClip],
                            image_embedder: EmbedderHandle, video_embedder: Optional[EmbedderHandle] = None,
                            fvd_length: int = 16) -> MetricReport:
    """Paired metrics over matched clips plus FID and (optionally) FVD."""
    if len(real_clips) != len(fake_clips):
        raise ValueError("real and generated clip lists differ in length")
    per_clip, all_pairs, lp = [], [], []
    for real, fake in zip(real_clips, fake_clips):
        if real.frames.shape != fake.frames.shape:
            raise ValueError(f"clip {real.clip_id!r}: shape mismatch with generated clip")
        pairs = list(zip(real.frames, fake.frames))
        l1, psnr = l1_psnr(pairs)
        d = perceptual_distance(clip_to_tensor(real), clip_to_tensor(fake), image_embedder)
        per_clip.append({"clip_id": real.clip_id, "l1": l1, "psnr": psnr, "lpips": d})
        all_pairs.extend(pairs)
        lp.append((d, len(pairs)))
    l1, psnr = l1_psnr(all_pairs)
    report = MetricReport(
        l1=l1, psnr=psnr,
        lpips=sum(d * n for d, n in lp) / sum(n for _, n in lp),
        fid=fid(embed_frames(real_clips, image_embedder), embed_frames(fake_clips, image_embedder)),
        per_clip=per_clip,
        provenance={"image": image_embedder.stamp()},
    )
    if video_embedder is not None and len(real_clips) >= 2:
        report.fvd = fvd(real_clips, fake_clips, video_embedder, fvd_length)
        report.provenance["video"] = video_embedder.stamp()
    return report


def evaluate_prediction(real_clips, fake_clips, image_embedder, video_embedder=None,
                        fvd_length: int = 16, report: Optional[MetricReport] = None) -> MetricReport:
    """Unpaired distribution metrics for cross-clip animation."""
    report = report or MetricReport(provenance={"image": image_embedder.stamp()})
    report.prediction_fid = fid(embed_frames(real_clips, image_embedder), embed_frames(fake_clips, image_embedder))
    if video_embedder is not None and len(real_clips) >= 2 and len(fake_clips) >= 2:
        report.prediction_fvd = fvd(real_clips, fake_clips, video_embedder, fvd_length)
        report.provenance["video"] = video_embedder.stamp()
    return report
