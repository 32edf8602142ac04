"""Video clips on disk, training-pair sampling, TPS augmentation and a
synthetic speckle-blob dataset with exact landmark ground truth.

Coordinates everywhere are normalized to [-1, 1]^2 with pixel centers at
``-1 + (2 i + 1) / n`` (see :func:`animotion.layers.make_coordinate_grid`).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

SPLITS = ("train", "test")


class DatasetError(ValueError):
    """A clip on disk violates the clip format or the VideoClip invariants."""


@dataclass
class VideoClip:
    frames: np.ndarray
    fps: float = 25.0
    landmarks: Optional[np.ndarray] = None
    landmark_names: Sequence[str] = ()
    clip_id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim == 3:
            frames = frames[..., None]
        if frames.ndim != 4:
            raise DatasetError(f"clip {self.clip_id!r}: frames must be (T, H, W, C), got {frames.shape}")
        if frames.shape[1] != frames.shape[2]:
            raise DatasetError(f"clip {self.clip_id!r}: frames must be square, got {frames.shape[1:3]}")
        if frames.size and (frames.min() < 0 or frames.max() > 1):
            raise DatasetError(f"clip {self.clip_id!r}: frame values must lie in [0, 1]")
        self.frames = frames
        if self.landmarks is not None:
            lm = np.asarray(self.landmarks, dtype=np.float64)
            if lm.ndim != 3 or lm.shape[0] != len(frames) or lm.shape[2] != 2:
                raise DatasetError(
                    f"clip {self.clip_id!r}: landmarks must be (T, S, 2) with T={len(frames)}, got {lm.shape}")
            if np.abs(lm).max(initial=0) > 1:
                raise DatasetError(f"clip {self.clip_id!r}: landmarks outside [-1, 1]^2")
            self.landmarks = lm
        self.landmark_names = tuple(self.landmark_names)

    def __len__(self):
        return len(self.frames)

    @property
    def resolution(self) -> int:
        return self.frames.shape[1]

    @property
    def num_channels(self) -> int:
        return self.frames.shape[3]


@dataclass
class FramePair:
    source: np.ndarray
    driving: np.ndarray
    source_landmarks: Optional[np.ndarray] = None
    driving_landmarks: Optional[np.ndarray] = None
    indices: tuple = (0, 0)


# --------------------------------------------------------------------------- TPS

def _tps_kernel(sq_dist):
    """U(r) = r^2 log r^2 written in the squared distance, U(0) = 0."""
    if isinstance(sq_dist, torch.Tensor):
        safe = torch.where(sq_dist > 0, sq_dist, torch.ones_like(sq_dist))
        return torch.where(sq_dist > 0, sq_dist * torch.log(safe), torch.zeros_like(sq_dist))
    safe = np.where(sq_dist > 0, sq_dist, 1.0)
    return np.where(sq_dist > 0, sq_dist * np.log(safe), 0.0)


def _tps_kernel_grad_coeff(sq_dist):
    """dU/d(s) * 2, so that grad_x U(|x - c|^2) = coeff * (x - c)."""
    safe = torch.where(sq_dist > 0, sq_dist, torch.ones_like(sq_dist))
    return torch.where(sq_dist > 0, 2 * (torch.log(safe) + 1), torch.zeros_like(sq_dist))


@dataclass
class TpsTransform:
    """Thin-plate spline interpolating ``control_points -> control_points + displacements``.

    The map is ``affine @ [x, 1] + s(x)`` where ``s`` is the standard TPS
    interpolant (kernel plus its own affine part) of the residual targets.
    The result is the minimum-bending interpolant of the targets whatever
    ``affine`` is; a good ``affine`` only improves conditioning.
    """

    control_points: np.ndarray
    displacements: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(2, 3))

    def __post_init__(self):
        self.control_points = np.asarray(self.control_points, dtype=np.float64)
        self.displacements = np.asarray(self.displacements, dtype=np.float64)
        self.affine = np.asarray(self.affine, dtype=np.float64)
        n = len(self.control_points)
        if n < 3 or self.control_points.shape != (n, 2) or self.displacements.shape != (n, 2):
            raise ValueError("TPS needs N >= 3 control points and matching (N, 2) displacements")
        if self.affine.shape != (2, 3):
            raise ValueError("affine must be 2x3")
        c = self.control_points
        targets = c + self.displacements
        residual = targets - (c @ self.affine[:, :2].T + self.affine[:, 2])
        kernel = _tps_kernel(((c[:, None] - c[None]) ** 2).sum(-1))
        poly = np.concatenate([np.ones((n, 1)), c], axis=1)
        system = np.zeros((n + 3, n + 3))
        system[:n, :n] = kernel
        system[:n, n:] = poly
        system[n:, :n] = poly.T
        rhs = np.zeros((n + 3, 2))
        rhs[:n] = residual
        sol = np.linalg.solve(system, rhs)
        self._weights = sol[:n]
        self._poly = sol[n:]

    @classmethod
    def identity(cls, grid_size=5):
        pts = control_grid(grid_size)
        return cls(pts, np.zeros_like(pts))

    def _params(self, like: torch.Tensor):
        kw = dict(dtype=like.dtype, device=like.device)
        return (torch.as_tensor(self.control_points, **kw), torch.as_tensor(self._weights, **kw),
                torch.as_tensor(self._poly, **kw), torch.as_tensor(self.affine, **kw))

    def __call__(self, coords):
        """Map coordinates of shape (..., 2); differentiable for torch inputs."""
        if not isinstance(coords, torch.Tensor):
            return self(torch.as_tensor(coords, dtype=torch.float64)).numpy()
        ctrl, w, poly, aff = self._params(coords)
        flat = coords.reshape(-1, 2)
        sq = ((flat[:, None, :] - ctrl[None]) ** 2).sum(-1)
        out = (flat @ aff[:, :2].T + aff[:, 2]
               + _tps_kernel(sq) @ w
               + poly[0] + flat @ poly[1:])
        return out.reshape(coords.shape)

    def jacobian(self, coords):
        """Analytic spatial derivative, shape (..., 2, 2) with [i, j] = d out_i / d x_j."""
        if not isinstance(coords, torch.Tensor):
            return self.jacobian(torch.as_tensor(coords, dtype=torch.float64)).numpy()
        ctrl, w, poly, aff = self._params(coords)
        flat = coords.reshape(-1, 2)
        diff = flat[:, None, :] - ctrl[None]
        coeff = _tps_kernel_grad_coeff((diff ** 2).sum(-1))
        # sum_i w_i (outer) grad U_i
        kern = torch.einsum("pn,nk,pnj->pkj", coeff, w, diff)
        jac = aff[:, :2] + poly[1:].T + kern
        return jac.reshape(*coords.shape[:-1], 2, 2)

    def invert(self, points, iterations=50, tol=1e-12):
        """Solve ``T(z) = points`` for z by Newton iteration (small deformations)."""
        target = np.asarray(points, dtype=np.float64)
        z = target.copy()
        for _ in range(iterations):
            r = self(z) - target
            if np.abs(r).max(initial=0) < tol:
                break
            jac = self.jacobian(z)
            z = z - np.linalg.solve(jac, r[..., None])[..., 0]
        return z


def control_grid(size=5):
    """``size x size`` control points spanning [-1, 1]^2, row-major (x fastest)."""
    t = np.linspace(-1, 1, size)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


DEFAULT_AFFINE_STRENGTH = 0.05


def random_tps(rng: np.random.Generator, strength: float, affine_strength: Optional[float] = None,
               grid_size: int = 5) -> TpsTransform:
    """Random TPS on a 5x5 control grid.

    The affine part is identity plus a zero-mean normal perturbation with
    standard deviation ``affine_strength`` (default ``min(strength, 0.05)``).  On top of the affine
    image of each control point sits an i.i.d. normal offset with standard
    deviation ``strength``; ``displacements`` stores the sum of both, so the
    transform still maps control point i to control point i + displacement i.
    """
    if strength <= 0:
        raise ValueError("strength must be positive")
    if affine_strength is None:
        affine_strength = min(strength, DEFAULT_AFFINE_STRENGTH)
    pts = control_grid(grid_size)
    offsets = rng.normal(0.0, strength, size=pts.shape)
    affine = np.eye(2, 3) + rng.normal(0.0, affine_strength, size=(2, 3))
    # an interpolating spline ignores its affine argument, so the perturbation
    # has to live in the targets to have any effect
    disp = pts @ affine[:, :2].T + affine[:, 2] - pts + offsets
    return TpsTransform(pts, disp, affine)


def tps_sampling_grid(tps: TpsTransform, size: int, dtype=torch.float32) -> torch.Tensor:
    from .layers import make_coordinate_grid
    grid = make_coordinate_grid(size, size, dtype=torch.float64)
    return tps(grid).to(dtype)


def apply_tps(frames: torch.Tensor, transforms: Sequence[TpsTransform]) -> torch.Tensor:
    """Warp a batch (B, C, H, W) so output(z) = input(T_b(z)) for each sample."""
    from .motion import warp
    size = frames.shape[-1]
    grids = torch.stack([tps_sampling_grid(t, size, frames.dtype) for t in transforms])
    return warp(frames, grids)


# --------------------------------------------------------------------------- pairs

def sample_pair(clip: VideoClip, rng: np.random.Generator) -> FramePair:
    """Uniformly random ordered pair of distinct frame indices."""
    n = len(clip)
    if n < 2:
        raise DatasetError(f"clip {clip.clip_id!r} has {n} frame(s); pairs need at least 2")
    i = int(rng.integers(n))
    j = int(rng.integers(n - 1))
    if j >= i:
        j += 1
    lm = clip.landmarks
    return FramePair(
        source=clip.frames[i],
        driving=clip.frames[j],
        source_landmarks=None if lm is None else lm[i],
        driving_landmarks=None if lm is None else lm[j],
        indices=(i, j),
    )


# --------------------------------------------------------------------------- disk IO

def _read_frame(path: Path, num_channels: Optional[int]):
    with Image.open(path) as img:
        img.load()
        if num_channels == 1:
            img = img.convert("L")
        elif num_channels == 3 or img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def pad_and_resize(frame: np.ndarray, size: int) -> np.ndarray:
    """Zero-pad to a centered square, then resize to ``size x size``."""
    h, w, c = frame.shape
    side = max(h, w)
    out = np.zeros((side, side, c), dtype=np.float32)
    top, left = (side - h) // 2, (side - w) // 2
    out[top:top + h, left:left + w] = frame
    if side == size:
        return out
    t = torch.from_numpy(out).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=side > size)
    return t[0].permute(1, 2, 0).clamp(0, 1).numpy()


def _pad_landmarks(lm: np.ndarray, h: int, w: int) -> np.ndarray:
    side = max(h, w)
    top, left = (side - h) // 2, (side - w) // 2
    out = lm.copy()
    out[..., 0] = ((lm[..., 0] + 1) * w / 2 + left) * 2 / side - 1
    out[..., 1] = ((lm[..., 1] + 1) * h / 2 + top) * 2 / side - 1
    return out


def load_clip(clip_dir, resolution: Optional[int] = None, num_channels: Optional[int] = None,
              num_landmarks: Optional[int] = None) -> VideoClip:
    clip_dir = Path(clip_dir)
    clip_id = clip_dir.name
    names = sorted(p for p in clip_dir.iterdir() if p.suffix.lower() == ".png" and p.stem.isdigit())
    if not names:
        raise DatasetError(f"clip {clip_id!r}: no frames found")
    frames = []
    for idx, path in enumerate(names):
        if int(path.stem) != idx:
            raise DatasetError(f"clip {clip_id!r}: missing frame {idx:06d}.png")
        try:
            arr = _read_frame(path, num_channels)
        except (OSError, ValueError) as exc:
            raise DatasetError(f"clip {clip_id!r}: frame {idx} unreadable ({exc})") from exc
        if frames and arr.shape != frames[0].shape:
            raise DatasetError(
                f"clip {clip_id!r}: frame {idx} has shape {arr.shape}, expected {frames[0].shape}")
        frames.append(arr)
    h, w = frames[0].shape[:2]

    meta = {}
    if (clip_dir / "meta.json").exists():
        try:
            meta = json.loads((clip_dir / "meta.json").read_text())
        except json.JSONDecodeError as exc:
            raise DatasetError(f"clip {clip_id!r}: corrupt meta.json ({exc})") from exc
    names_lm = tuple(meta.get("landmark_names", ()))
    expected = num_landmarks if num_landmarks is not None else (len(names_lm) or None)

    landmarks = None
    lm_path = clip_dir / "landmarks.json"
    if lm_path.exists():
        try:
            raw = json.loads(lm_path.read_text())
        except json.JSONDecodeError as exc:
            raise DatasetError(f"clip {clip_id!r}: corrupt landmarks.json ({exc})") from exc
        per_frame = {}
        for key, pts in raw.items():
            idx = int(key)
            if not 0 <= idx < len(frames):
                raise DatasetError(f"clip {clip_id!r}: landmarks reference missing frame {idx}")
            pts = np.asarray(pts, dtype=np.float64)
            if expected is None:
                expected = len(pts)
            if pts.shape != (expected, 2):
                raise DatasetError(
                    f"clip {clip_id!r}: frame {idx} has {len(pts)} landmarks, schema requires {expected}")
            per_frame[idx] = pts
        if len(per_frame) != len(frames):
            missing = sorted(set(range(len(frames))) - set(per_frame))
            raise DatasetError(f"clip {clip_id!r}: frames {missing[:5]} lack landmarks")
        landmarks = np.stack([per_frame[i] for i in range(len(frames))])
        if h != w:
            landmarks = _pad_landmarks(landmarks, h, w)

    size = resolution if resolution is not None else max(h, w)
    if h != w or size != h:
        frames = [pad_and_resize(f, size) for f in frames]
    return VideoClip(np.stack(frames), fps=float(meta.get("fps", 25.0)), landmarks=landmarks,
                     landmark_names=names_lm, clip_id=clip_id)


def load_dataset(root, split: str = "train", resolution: Optional[int] = None,
                 num_channels: Optional[int] = None, num_landmarks: Optional[int] = None):
    """Load every clip under ``root/split`` in lexicographic clip-id order."""
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise DatasetError(f"missing split directory {split_dir}")
    dirs = sorted(p for p in split_dir.iterdir() if p.is_dir())
    return [load_clip(d, resolution, num_channels, num_landmarks) for d in dirs]


def save_clip(clip: VideoClip, clip_dir) -> Path:
    """Write ``clip`` in the on-disk clip format (8-bit PNG frames)."""
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    for idx, frame in enumerate(clip.frames):
        arr = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)
        img = Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr)
        img.save(clip_dir / f"{idx:06d}.png")
    meta = {"fps": clip.fps, "landmark_names": list(clip.landmark_names)}
    (clip_dir / "meta.json").write_text(json.dumps(meta, indent=2))
    if clip.landmarks is not None:
        lm = {str(i): clip.landmarks[i].tolist() for i in range(len(clip))}
        (clip_dir / "landmarks.json").write_text(json.dumps(lm))
    return clip_dir


# --------------------------------------------------------------------------- synthetic data

LANDMARK_NAMES = ("lower_edge", "neck")
# bright and dark markers so each landmark's identity is visible in a single frame
MARKER_LEVELS = (1.0, 0.0)
TEXTURE_RANGE = (0.2, 0.85)
MARKER_RADIUS_PX = 1.5


def _smooth_speckle(rng, size, smooth=0.8):
    """Rayleigh-distributed multiplicative speckle with unit mean."""
    sigma = np.sqrt(2 / np.pi)
    field_ = rng.rayleigh(sigma, size=(size, size))
    field_ = ndimage.gaussian_filter(field_, smooth, mode="wrap")
    return field_ / field_.mean()


def _sample_lattice(lattice, coords, extent):
    """Bilinear lookup of ``lattice`` over [-extent, extent]^2 at (x, y) coords."""
    n = lattice.shape[0]
    u = (coords[..., 0] + extent) / (2 * extent) * (n - 1)
    v = (coords[..., 1] + extent) / (2 * extent) * (n - 1)
    return ndimage.map_coordinates(lattice, [v.ravel(), u.ravel()], order=1, mode="wrap").reshape(u.shape)


class _Scene:
    def __init__(self, rng, resolution, frames_per_clip, amplitude, deform):
        self.res = resolution
        self.T = frames_per_clip
        self.amplitude = amplitude
        self.deform = deform
        n_blobs = int(rng.integers(2, 4))
        self.blobs = []
        for _ in range(n_blobs):
            self.blobs.append(dict(
                center=rng.uniform(-0.45, 0.45, size=2),
                radii=rng.uniform(0.2, 0.32, size=2),
                angle=rng.uniform(0, np.pi),
                intensity=rng.uniform(0.45, 0.75),
                speckle=_smooth_speckle(rng, 48),
                freqs=rng.uniform(0.5, 1.5, size=(2, 2)),
                phases=rng.uniform(0, 2 * np.pi, size=(2, 2)),
                amps=rng.normal(0, 0.12, size=(2, 2)) * [[1.0], [0.4]],
            ))
        self.background = _smooth_speckle(rng, 96)
        self.bg_level = rng.uniform(0.08, 0.16)
        ry0 = self.blobs[0]["radii"][1]
        rx1 = self.blobs[1]["radii"][0]
        # anchor 0: lower edge of blob 0; anchor 1: left side of blob 1
        self.anchors = [(0, np.array([0.0, 0.75 * ry0])), (1, np.array([-0.75 * rx1, 0.0]))]
        self.ctrl_amp = rng.normal(0, 0.04, size=(25, 2))
        self.ctrl_phase = rng.uniform(0, 2 * np.pi, size=(25, 2))
        self.ctrl_freq = rng.uniform(0.5, 1.5)

    @staticmethod
    def _rot(angle):
        c, s = np.cos(angle), np.sin(angle)
        return np.array([[c, -s], [s, c]])

    def offset(self, blob, t):
        phase = 2 * np.pi * t / self.T
        waves = blob["amps"] * np.sin(blob["freqs"] * phase + blob["phases"])
        return self.amplitude * waves.sum(axis=0)

    def frame_tps(self, t):
        phase = 2 * np.pi * t / self.T
        disp = self.amplitude * self.deform * self.ctrl_amp * np.sin(self.ctrl_freq * phase + self.ctrl_phase)
        return TpsTransform(control_grid(5), disp)

    def to_local(self, blob, canon, t):
        rot = self._rot(blob["angle"])
        return (canon - blob["center"] - self.offset(blob, t)) @ rot

    def to_canonical(self, blob, local, t):
        rot = self._rot(blob["angle"])
        return local @ rot.T + blob["center"] + self.offset(blob, t)

    def marker(self, local, anchor_local):
        px = 2.0 / self.res
        d = np.sqrt(((local - anchor_local) ** 2).sum(-1)) / px
        r = MARKER_RADIUS_PX
        return np.where(d <= r, 1.0, np.exp(-((d - r) ** 2) / (2 * 0.8 ** 2)))

    def intensity_at(self, canon, t):
        """Rendered intensity at canonical coordinates (pre-TPS), shape canon.shape[:-1]."""
        img = self.bg_level * _sample_lattice(self.background, canon, 1.2)
        for blob in self.blobs:
            local = self.to_local(blob, canon, t)
            rho = np.sqrt(((local / blob["radii"]) ** 2).sum(-1))
            mask = 1 / (1 + np.exp(-(1 - rho) / 0.04))
            tex = blob["intensity"] * _sample_lattice(blob["speckle"], local / blob["radii"], 1.5)
            # texture stays clear of the marker levels so markers are unambiguous
            tex = np.clip(tex, TEXTURE_RANGE[0], TEXTURE_RANGE[1])
            img = img * (1 - mask) + tex * mask
        for (blob_idx, anchor), level in zip(self.anchors, MARKER_LEVELS):
            local = self.to_local(self.blobs[blob_idx], canon, t)
            m = self.marker(local, anchor)
            img = img * (1 - m) + level * m
        return np.clip(img, 0, 1)

    def render(self, t):
        from .layers import make_coordinate_grid
        grid = make_coordinate_grid(self.res, self.res, dtype=torch.float64).numpy()
        tps = self.frame_tps(t)
        canon = tps(grid)
        frame = self.intensity_at(canon, t)
        landmarks = []
        for blob_idx, anchor in self.anchors:
            target = self.to_canonical(self.blobs[blob_idx], anchor, t)
            landmarks.append(tps.invert(target[None])[0])
        return frame[..., None].astype(np.float32), np.array(landmarks)


def synth_clip(rng: np.random.Generator, frames_per_clip=32, resolution=64, amplitude=1.0,
               deform=1.0, clip_id="", fps=25.0) -> VideoClip:
    """One synthetic clip of speckle-textured blobs with two tracked landmarks."""
    for _ in range(100):
        scene = _Scene(rng, resolution, frames_per_clip, amplitude, deform)
        rendered = [scene.render(t) for t in range(frames_per_clip)]
        landmarks = np.stack([lm for _, lm in rendered])
        # keep markers fully inside the frame
        if np.abs(landmarks).max() < 0.9:
            frames = np.stack([f for f, _ in rendered])
            return VideoClip(frames, fps=fps, landmarks=landmarks,
                             landmark_names=LANDMARK_NAMES, clip_id=clip_id)
    raise RuntimeError("could not place landmarks inside the frame")


def synth_generate(root, n_clips: int, frames_per_clip: int, resolution: int,
                   rng: np.random.Generator, split: str = "train", amplitude: float = 1.0,
                   deform: float = 1.0, write: bool = True):
    """Generate ``n_clips`` synthetic clips under ``root/split``.

    Returns the in-memory clips; their landmarks are the exact ground truth
    (before the 8-bit quantization of frames on disk).
    """
    if resolution < 32:
        raise ValueError("resolution must be >= 32")
    if frames_per_clip < 8:
        raise ValueError("frames_per_clip must be >= 8")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    clips = []
    for i in range(n_clips):
        clip = synth_clip(rng, frames_per_clip, resolution, amplitude, deform, clip_id=f"clip{i:04d}")
        if write:
            save_clip(clip, Path(root) / split / clip.clip_id)
        clips.append(clip)
    return clips


def clip_to_tensor(clip: VideoClip) -> torch.Tensor:
    """(T, C, H, W) float tensor of a clip's frames."""
    return torch.from_numpy(np.ascontiguousarray(clip.frames)).permute(0, 3, 1, 2).contiguous()


def tensor_to_clip(frames: torch.Tensor, like: Optional[VideoClip] = None, clip_id=None) -> VideoClip:
    arr = frames.detach().clamp(0, 1).permute(0, 2, 3, 1).cpu().numpy()
    return VideoClip(arr, fps=like.fps if like is not None else 25.0,
                     clip_id=clip_id if clip_id is not None else (like.clip_id if like is not None else ""))
