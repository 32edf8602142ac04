"""Command line entry point: ``animotion <command> [options]``.

Every command resolves one configuration with precedence
flags > ``--config`` file > profile defaults, prints schema-versioned JSON on
stdout and reports failures as JSON on stderr with a typed exit code.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml
from PIL import Image

from . import __version__
from .config import SCHEMA_VERSION, Config, ConfigError, apply_overrides, config_from_dict, dump_config
from .dataset import (DatasetError, _read_frame, load_clip, load_dataset, pad_and_resize,
                      save_clip, synth_generate)
from .inference import MODES, Outputs, animate, reconstruct
from .losses import ExtractorUnavailable, NonFiniteLossError
from .metrics import EmbedderUnavailable, evaluate_prediction, evaluate_reconstruction, make_embedders
from .motion import SingularJacobianError
from .training import ENTRIES, build_models, fit, load_checkpoint, restore, save_checkpoint, snapshot

logger = logging.getLogger("animotion")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, ExtractorUnavailable, EmbedderUnavailable)):
        return EXIT_CONFIG
    if isinstance(exc, (NonFiniteLossError, SingularJacobianError, FloatingPointError, ArithmeticError)):
        return EXIT_NUMERIC
    if isinstance(exc, (DatasetError, FileNotFoundError, NotADirectoryError, ValueError)):
        return EXIT_DATA
    return EXIT_FAILURE


def emit(payload: dict, stream=None):
    stream = stream or sys.stdout
    stream.write(json.dumps({"schema_version": SCHEMA_VERSION, **payload}, indent=2) + "\n")


# --------------------------------------------------------------------------- config resolution

def _parse_set(items) -> dict:
    """``["train.epochs=3", "model.detector.num_kp=5"]`` -> nested dict."""
    out: dict = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = out
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def _read_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _flag_overrides(args) -> dict:
    train = {}
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("learning_rate", "learning_rate"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            train[key] = value
    return {"train": train} if train else {}


def resolve_config(args, base: Optional[Config] = None) -> Config:
    """Profile defaults (or ``base``), then the config file, then flags."""
    data = _read_config_file(args.config) if getattr(args, "config", None) else {}
    if getattr(args, "profile", None):
        data["profile"] = args.profile
    if base is None:
        config = config_from_dict(data)
    else:
        data.pop("schema_version", None)
        config = apply_overrides(base, data)
    config = apply_overrides(config, _parse_set(getattr(args, "set", None)))
    return apply_overrides(config, _flag_overrides(args))


# --------------------------------------------------------------------------- image helpers

def _to_uint8(arr: np.ndarray) -> np.ndarray:
    return (np.clip(arr, 0, 1) * 255 + 0.5).astype(np.uint8)


def _save_image(arr: np.ndarray, path: Path):
    """Save an (H, W, C) float array in [0, 1]."""
    img = _to_uint8(arr)
    Image.fromarray(img[..., 0] if img.shape[-1] == 1 else img).save(path)


def _chw_to_hwc(t: torch.Tensor) -> np.ndarray:
    return t.permute(1, 2, 0).cpu().numpy()


def dump_branches(outs: Outputs, out_dir: Path):
    """One content | texture | final strip per frame; texture is shown shifted to [0, 1]."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(len(outs.final)):
        strip = np.concatenate([_chw_to_hwc(outs.content[i]),
                                _chw_to_hwc((outs.texture[i] + 1) / 2),
                                _chw_to_hwc(outs.final[i])], axis=1)
        _save_image(strip, out_dir / f"{i:06d}.png")


def dump_motion(outs: Outputs, out_dir: Path, size: int):
    """Attention masks (one tile per motion slot) followed by the occlusion map."""
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = torch.cat([outs.attention, torch.nn.functional.interpolate(
        outs.occlusion, size=outs.attention.shape[-2:], mode="bilinear", align_corners=False)], dim=1)
    maps = torch.nn.functional.interpolate(maps, size=(size, size), mode="nearest")
    for i in range(len(maps)):
        row = np.concatenate([m.cpu().numpy() for m in maps[i]], axis=1)
        _save_image(row[..., None], out_dir / f"{i:06d}.png")


def load_clip_dir(root, config: Config) -> list:
    """Clips stored as subdirectories of ``root``, or ``root`` itself if it holds frames."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    m = config.model
    if (root / "000000.png").exists():
        return [load_clip(root, m.resolution, m.num_channels)]
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise DatasetError(f"no clips under {root}")
    return [load_clip(d, m.resolution, m.num_channels) for d in dirs]


def _load_source(path, frame: int, config: Config) -> np.ndarray:
    path = Path(path)
    m = config.model
    if path.is_dir():
        clip = load_clip(path, m.resolution, m.num_channels)
        if not -len(clip) <= frame < len(clip):
            raise DatasetError(f"source frame {frame} out of range for {len(clip)}-frame clip")
        return clip.frames[frame]
    if not path.exists():
        raise DatasetError(f"source image not found: {path}")
    return pad_and_resize(_read_frame(path, m.num_channels), m.resolution)


def _models_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    config = ckpt.parsed_config
    models, _ = restore(ckpt, config, with_optimizers=False)
    return models, config, ckpt


# --------------------------------------------------------------------------- commands

def cmd_synth_data(args) -> int:
    rng = np.random.default_rng(args.seed)
    counts = {}
    for split, n in (("train", args.n_clips), ("test", args.n_test)):
        if n:
            synth_generate(args.out, n, args.frames, args.resolution, rng, split=split,
                           amplitude=args.amplitude, deform=args.deform)
            counts[split] = n
    emit({"command": "synth-data", "root": str(args.out), "clips": counts,
          "frames_per_clip": args.frames, "resolution": args.resolution, "seed": args.seed})
    return EXIT_OK


def cmd_train(args) -> int:
    resume = load_checkpoint(args.resume) if args.resume else None
    config = resolve_config(args, base=resume.parsed_config if resume else None)
    out = Path(args.out)
    m = config.model
    if args.data is None:
        if config.train.epochs != 0 or resume is not None:
            raise DatasetError("--data is required unless --epochs 0")
        ckpt = snapshot(build_models(config), None, config, 0, 0)
        path = save_checkpoint(ckpt, out / "checkpoint.pt")
        emit({"command": "train", "checkpoint": str(path), "epoch": 0, "step": 0, "config": config.to_dict()})
        return EXIT_OK
    clips = load_dataset(args.data, "train", m.resolution, m.num_channels)
    if not clips:
        raise DatasetError(f"no training clips under {args.data}/train")
    (out).mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(config))

    def progress(entry):
        logger.info("epoch %d step %d total_g %.4f total_d %.4f",
                    entry["epoch"], entry["step"], entry["total_g"], entry["total_d"])

    result = fit(clips, config, out_dir=out, resume=resume, deterministic=not args.nondeterministic,
                 progress=progress)
    emit({"command": "train", "checkpoint": str(out / "checkpoint.pt"), "epoch": result.checkpoint.epoch,
          "step": result.checkpoint.step, "last": result.log[-1] if result.log else None,
          "config": config.to_dict()})
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    models, config, _ = _models_from_checkpoint(args.checkpoint)
    clips = load_clip_dir(args.data, config)
    out = Path(args.out)
    written = []
    for clip in clips:
        result, outs = reconstruct(clip, models, return_outputs=True)
        clip_dir = save_clip(result, out / clip.clip_id)
        if args.dump_branches:
            dump_branches(outs, clip_dir / "branches")
        if args.dump_motion:
            dump_motion(outs, clip_dir / "motion", config.model.resolution)
        written.append(str(clip_dir))
    emit({"command": "reconstruct", "outputs": written, "config": config.to_dict()})
    return EXIT_OK


def cmd_animate(args) -> int:
    models, config, _ = _models_from_checkpoint(args.checkpoint)
    source = _load_source(args.source, args.source_frame, config)
    (driving,) = load_clip_dir(args.driving, config)
    result, outs = animate(source, driving, models, mode=args.mode, return_outputs=True)
    clip_dir = save_clip(result, Path(args.out))
    if args.dump_branches:
        dump_branches(outs, clip_dir / "branches")
    if args.dump_motion:
        dump_motion(outs, clip_dir / "motion", config.model.resolution)
    emit({"command": "animate", "output": str(clip_dir), "mode": args.mode, "frames": len(result),
          "config": config.to_dict()})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.checkpoint:
        config = resolve_config(args, base=load_checkpoint(args.checkpoint).parsed_config)
    else:
        config = resolve_config(args)
    if args.embedder:
        config = apply_overrides(config, {"eval": {"embedder": args.embedder}})
    e = config.eval
    image_emb, video_emb = make_embedders(e.embedder, config.model.num_channels, e.embedder_seed)
    real = load_clip_dir(args.real, config)
    report = None
    if args.fake:
        fake = load_clip_dir(args.fake, config)
        by_id = {c.clip_id: c for c in fake}
        missing = [c.clip_id for c in real if c.clip_id not in by_id]
        if missing:
            raise DatasetError(f"generated clips missing for {missing}")
        report = evaluate_reconstruction(real, [by_id[c.clip_id] for c in real], image_emb, video_emb,
                                         e.fvd_frames)
    if args.prediction:
        report = evaluate_prediction(real, load_clip_dir(args.prediction, config), image_emb, video_emb,
                                     e.fvd_frames, report=report)
    if report is None:
        raise ConfigError("evaluate needs --fake and/or --prediction")
    report.config = config.to_dict()
    if args.report:
        Path(args.report).write_text(report.to_json(indent=2))
    sys.stdout.write(report.to_json(indent=2) + "\n")
    sys.stderr.write(report.table() + "\n")
    return EXIT_OK


def cmd_inspect_checkpoint(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    entries = {}
    for name in ENTRIES:
        tensors = [v for v in ckpt.states[name].values() if isinstance(v, torch.Tensor)]
        entries[name] = {"tensors": len(tensors), "elements": int(sum(t.numel() for t in tensors))}
    emit({"command": "inspect-checkpoint", "path": str(args.checkpoint), "epoch": ckpt.epoch,
          "step": ckpt.step, "has_optimizer_state": ckpt.optimizer_g is not None,
          "entries": entries, "rng": ckpt.rng, "config": ckpt.config})
    return EXIT_OK


def cmd_dump_config(args) -> int:
    sys.stdout.write(dump_config(resolve_config(args)))
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def _config_args(p, training=False):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--profile", choices=("paper", "desk"), help="base hyperparameter profile")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config value, e.g. train.num_repeats=5 (repeatable)")
    if training:
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--learning-rate", type=float)
        p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="animotion", description="Keypoint-driven image animation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic dataset with ground-truth landmarks")
    p.add_argument("--out", required=True)
    p.add_argument("--n-clips", type=int, default=20)
    p.add_argument("--n-test", type=int, default=5)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--deform", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train all networks; resumable")
    p.add_argument("--data", help="dataset root containing train/")
    p.add_argument("--out", default="run")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--nondeterministic", action="store_true", help="allow nondeterministic kernels")
    _config_args(p, training=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="drive each clip's middle frame with the clip itself")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory of clips")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-branches", action="store_true", help="write content|texture|final strips")
    p.add_argument("--dump-motion", action="store_true", help="write attention and occlusion maps")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("animate", help="animate a source frame with a driving clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="PNG image or clip directory")
    p.add_argument("--source-frame", type=int, default=0, help="frame index when --source is a clip")
    p.add_argument("--driving", required=True, help="driving clip directory")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES, default="relative")
    p.add_argument("--dump-branches", action="store_true")
    p.add_argument("--dump-motion", action="store_true")
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("evaluate", help="score generated clips against real ones")
    p.add_argument("--real", required=True, help="directory of real clips")
    p.add_argument("--fake", help="reconstructions, matched to --real by clip id")
    p.add_argument("--prediction", help="cross-clip animations (unpaired metrics)")
    p.add_argument("--checkpoint", help="take the config snapshot from this checkpoint")
    p.add_argument("--embedder", choices=("fallback", "pretrained"))
    p.add_argument("--report", help="also write the JSON report here")
    _config_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-checkpoint", help="summarize a checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect_checkpoint)

    p = sub.add_parser("dump-config", help="print the resolved config as YAML")
    _config_args(p, training=True)
    p.set_defaults(func=cmd_dump_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a structured error
        code = exit_code_for(exc)
        emit({"error": {"type": type(exc).__name__, "message": str(exc), "exit_code": code,
                        "command": args.command}}, sys.stderr)
        if args.verbose:
            logger.exception("command failed")
        return code


if __name__ == "__main__":
    sys.exit(main())
