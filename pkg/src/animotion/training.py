"""Weakly-supervised adversarial training loop and checkpoint archive."""
from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .adversary import PatchDiscriminator
from .config import SCHEMA_VERSION, Config, config_from_dict
from .dataset import FramePair, VideoClip, apply_tps, random_tps, sample_pair
from .generator import DualDecoderGenerator
from .keypoints import KeypointDetector, KeypointSet
from .losses import (LossReport, NonFiniteLossError, PyramidSpec, equivariance_loss,
                     feature_matching, keypoint_supervision_loss, lsgan_discriminator_loss,
                     lsgan_generator_loss, make_extractor, reconstruction_l1,
                     reconstruction_perceptual, total)
from .motion import DenseMotionNetwork

logger = logging.getLogger(__name__)

ENTRIES = ("keypoint_detector", "dense_motion", "generator", "discriminator")


class Models(nn.Module):
    """All trainable networks of one configuration."""

    def __init__(self, config: Config):
        super().__init__()
        m = config.model
        det = m.detector
        self.config = config
        self.keypoint_detector = KeypointDetector(det, m.num_channels)
        n_motion = det.num_total if det.sup_in_motion else det.num_kp
        self.dense_motion = DenseMotionNetwork(m.dense_motion, n_motion, m.num_channels)
        self.generator = DualDecoderGenerator(m.generator, m.num_channels)
        self.discriminator = PatchDiscriminator(m.discriminator, m.num_channels)

    def generator_parameters(self):
        for name in ("keypoint_detector", "dense_motion", "generator"):
            yield from getattr(self, name).parameters()

    def motion_keypoints(self, kp: KeypointSet) -> KeypointSet:
        return kp.select(self.config.model.detector.sup_in_motion)

    def animate(self, source, kp_source: KeypointSet, kp_driving: KeypointSet):
        """Dense motion + generation for already-detected keypoints."""
        motion = self.dense_motion(source, self.motion_keypoints(kp_source),
                                   self.motion_keypoints(kp_driving))
        return motion, self.generator(source, motion)


def build_models(config: Config, seed: Optional[int] = None) -> Models:
    torch.manual_seed(config.train.seed if seed is None else seed)
    return Models(config)


def make_optimizers(models: Models, config: Config):
    t = config.train
    opt_g = torch.optim.Adam(models.generator_parameters(), lr=t.learning_rate, betas=t.betas)
    opt_d = torch.optim.Adam(models.discriminator.parameters(), lr=t.learning_rate, betas=t.betas)
    return opt_g, opt_d


@contextlib.contextmanager
def frozen(module: nn.Module):
    """Temporarily stop gradients into ``module``'s parameters (inputs still get them)."""
    flags = [p.requires_grad for p in module.parameters()]
    module.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


def gan_enabled(config: Config) -> bool:
    w = config.loss_weights
    return config.train.use_gan and (w.gan_g > 0 or w.gan_d > 0 or w.feat > 0)


def collate(pairs: Sequence[FramePair]):
    def stack(arrs):
        return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous().float()

    source = stack([p.source for p in pairs])
    driving = stack([p.driving for p in pairs])
    if all(p.source_landmarks is not None for p in pairs):
        src_lm = torch.from_numpy(np.stack([p.source_landmarks for p in pairs])).float()
        drv_lm = torch.from_numpy(np.stack([p.driving_landmarks for p in pairs])).float()
    else:
        src_lm = drv_lm = None
    return source, driving, src_lm, drv_lm


@dataclass
class StepState:
    """Everything ``train_step`` mutates besides the model weights."""

    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    extractor: nn.Module
    pyramid: PyramidSpec


def make_step_state(models: Models, config: Config, extractor=None) -> StepState:
    opt_g, opt_d = make_optimizers(models, config)
    if extractor is None:
        extractor = make_extractor(config.train.perceptual, config.model.num_channels, seed=config.train.seed)
    return StepState(opt_g, opt_d, extractor, PyramidSpec(config.train.pyramid))


def train_step(pairs: Sequence[FramePair], models: Models, config: Config, state: StepState,
               rng: np.random.Generator, observe: Optional[Callable] = None) -> LossReport:
    """One generator-side update followed by one discriminator update.

    ``observe``, if given, is called with the step's ``GeneratorOutput``.
    """
    w = config.loss_weights
    det_cfg = config.model.detector
    models.train()
    source, driving, src_lm, drv_lm = collate(pairs)
    b = source.shape[0]

    transforms = [random_tps(rng, config.train.tps_strength, config.train.tps_affine_strength)
                  for _ in range(b)]
    transformed = apply_tps(driving, transforms).clamp(0, 1)

    kp_all = models.keypoint_detector(torch.cat([source, driving, transformed]))
    kp_source, kp_driving, kp_transformed = (
        KeypointSet(kp_all.coords[i * b:(i + 1) * b], kp_all.jacobians[i * b:(i + 1) * b],
                    kp_all.heatmaps[i * b:(i + 1) * b], kp_all.num_kp) for i in range(3))

    comps = {}
    if w.eq > 0:
        comps["eq1"], comps["eq2"] = equivariance_loss(kp_driving, kp_transformed, transforms,
                                                       include_sup=det_cfg.sup_in_equivariance)
    if det_cfg.num_sup > 0 and src_lm is not None and w.key > 0:
        n = det_cfg.num_kp
        heat = torch.cat([kp_source.heatmaps[:, n:], kp_driving.heatmaps[:, n:]])
        comps["key"] = keypoint_supervision_loss(heat, torch.cat([src_lm, drv_lm]), det_cfg.gt_sigma)

    _, out = models.animate(source, kp_source, kp_driving)
    if observe is not None:
        observe(out)
    comps["rec_l1"] = reconstruction_l1(driving, out.content, state.pyramid)
    if w.rec_perc > 0:
        comps["rec_perc"] = reconstruction_perceptual(driving, out.final, state.pyramid, state.extractor)

    use_gan = gan_enabled(config)
    if use_gan:
        with frozen(models.discriminator):
            dis_fake = models.discriminator(out.final)
            dis_real = models.discriminator(driving)
            comps["gan_g"] = lsgan_generator_loss(dis_fake)
            comps["feat"] = feature_matching(dis_real, dis_fake)

    report = total(comps, w)
    state.opt_g.zero_grad(set_to_none=True)
    report.total_g.backward()
    state.opt_g.step()

    gan_d = torch.zeros(())
    if use_gan:
        fake = out.final.detach()
        gan_d = lsgan_discriminator_loss(models.discriminator(driving), models.discriminator(fake))
        if not math.isfinite(float(gan_d.detach())):
            raise NonFiniteLossError("gan_d", float(gan_d.detach()))
        state.opt_d.zero_grad(set_to_none=True)
        (w.gan_d * gan_d).backward()
        state.opt_d.step()

    values = report.as_dict()
    values["gan_d"] = float(gan_d.detach())
    values["total_d"] = w.gan_d * float(gan_d.detach())
    return LossReport(**values)


# --------------------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    states: dict
    optimizer_g: Optional[dict]
    optimizer_d: Optional[dict]
    epoch: int
    step: int
    config: dict
    rng: dict = field(default_factory=dict)

    def to_archive(self):
        return {
            "schema_version": SCHEMA_VERSION,
            **{name: self.states[name] for name in ENTRIES},
            "optimizer_g": self.optimizer_g,
            "optimizer_d": self.optimizer_d,
            "epoch": self.epoch,
            "step": self.step,
            "rng": self.rng,
            "config": json.dumps(self.config, sort_keys=True),
        }

    @classmethod
    def from_archive(cls, archive):
        return cls(
            states={name: archive[name] for name in ENTRIES},
            optimizer_g=archive.get("optimizer_g"),
            optimizer_d=archive.get("optimizer_d"),
            epoch=archive["epoch"],
            step=archive["step"],
            config=json.loads(archive["config"]),
            rng=archive.get("rng", {}),
        )

    @property
    def parsed_config(self) -> Config:
        return config_from_dict(self.config)


def snapshot(models: Models, state: Optional[StepState], config: Config, epoch: int, step: int) -> Checkpoint:
    def clone(sd):
        return {k: v.detach().clone() if isinstance(v, torch.Tensor) else v for k, v in sd.items()}

    return Checkpoint(
        states={name: clone(getattr(models, name).state_dict()) for name in ENTRIES},
        optimizer_g=None if state is None else state.opt_g.state_dict(),
        optimizer_d=None if state is None else state.opt_d.state_dict(),
        epoch=epoch,
        step=step,
        config=config.to_dict(),
        # every epoch reseeds from (seed, epoch), so this pins the stream exactly
        rng={"seed": config.train.seed, "next_epoch": epoch},
    )


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(ckpt.to_archive(), tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    archive = torch.load(path, map_location="cpu", weights_only=False)
    return Checkpoint.from_archive(archive)


def restore(ckpt: Checkpoint, config: Optional[Config] = None, with_optimizers: bool = True):
    """Rebuild models (and optionally optimizer state) from a checkpoint."""
    config = config or ckpt.parsed_config
    models = build_models(config)
    for name in ENTRIES:
        getattr(models, name).load_state_dict(ckpt.states[name])
    state = None
    if with_optimizers:
        state = make_step_state(models, config)
        if ckpt.optimizer_g is not None:
            state.opt_g.load_state_dict(ckpt.optimizer_g)
            state.opt_d.load_state_dict(ckpt.optimizer_d)
    return models, state


# --------------------------------------------------------------------------- fit

def epoch_batches(n_clips: int, config: Config, rng: np.random.Generator) -> List[np.ndarray]:
    t = config.train
    order = np.concatenate([rng.permutation(n_clips) for _ in range(t.num_repeats)])
    n_steps = math.ceil(len(order) / t.batch_size)
    return [order[i * t.batch_size:(i + 1) * t.batch_size] for i in range(n_steps)]


@dataclass
class FitResult:
    checkpoint: Checkpoint
    log: List[dict]
    models: Models = None


def fit(clips: Sequence[VideoClip], config: Config, out_dir=None, resume=None,
        extractor=None, deterministic: bool = True, progress=None) -> FitResult:
    """Train for ``config.train.epochs`` epochs; resumable from a checkpoint.

    With ``out_dir`` set, writes ``checkpoint.pt`` every ``checkpoint_interval``
    epochs and appends one JSON line per step to ``train_log.jsonl``.
    """
    if not clips:
        raise ValueError("cannot fit on an empty dataset")
    if deterministic:
        torch.use_deterministic_algorithms(True)
    t = config.train
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        models, state = restore(ckpt, config)
        if extractor is not None:
            state.extractor = extractor
        start_epoch, step = ckpt.epoch, ckpt.step
    else:
        models = build_models(config)
        state = make_step_state(models, config, extractor)
        start_epoch, step = 0, 0

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "a" if resume is not None else "w")

    log = []
    ckpt = snapshot(models, state, config, start_epoch, step)
    try:
        if out_dir is not None and start_epoch == 0 and t.epochs == 0:
            save_checkpoint(ckpt, out_dir / "checkpoint.pt")
        for epoch in range(start_epoch, t.epochs):
            rng = np.random.default_rng([t.seed, epoch])
            for batch in epoch_batches(len(clips), config, rng):
                pairs = [sample_pair(clips[i], rng) for i in batch]
                try:
                    report = train_step(pairs, models, config, state, rng)
                except NonFiniteLossError as exc:
                    _dump_diagnostics(out_dir, exc, log, config, epoch, step)
                    raise
                step += 1
                entry = {"epoch": epoch, "step": step, **report.as_dict()}
                log.append(entry)
                if log_fh is not None:
                    log_fh.write(json.dumps(entry) + "\n")
                    log_fh.flush()
                if progress is not None:
                    progress(entry)
            ckpt = snapshot(models, state, config, epoch + 1, step)
            if out_dir is not None and ((epoch + 1) % t.checkpoint_interval == 0 or epoch + 1 == t.epochs):
                save_checkpoint(ckpt, out_dir / "checkpoint.pt")
    finally:
        if log_fh is not None:
            log_fh.close()
    return FitResult(ckpt, log, models)


def _dump_diagnostics(out_dir, exc, log, config, epoch, step):
    info = {"error": str(exc), "component": getattr(exc, "component", None), "epoch": epoch,
            "step": step, "recent": log[-10:], "config": config.to_dict()}
    logger.error("numerical abort at epoch %d step %d: %s", epoch, step, exc)
    if out_dir is not None:
        (Path(out_dir) / "diagnostics.json").write_text(json.dumps(info, indent=2))
