"""Synthetic motion videos, the binary clip format, and clip sampling.

The synthetic task renders a bright square drifting across a textured
background. Each class has its own velocity (and optional oscillation); the
square wraps around the frame edges and starts at a uniformly random
position, so every single frame has the same distribution for every class.
Only the temporal pattern identifies the class.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DTYPE, Rng

MEAN = 0.45
STD = 0.225


@dataclass
class VideoClip:
    frames: np.ndarray  # uint8 (3, T, H, W)
    label: int

    def __post_init__(self):
        if self.frames.dtype != np.uint8 or self.frames.ndim != 4 or self.frames.shape[0] != 3:
            raise ValueError(f"frames must be uint8 (3, T, H, W), got {self.frames.dtype} {self.frames.shape}")

    def __eq__(self, other):
        return (
            isinstance(other, VideoClip)
            and self.label == other.label
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
        )


@dataclass(frozen=True)
class Motion:
    """Per-frame displacement ``(dy, dx)`` plus a sinusoidal wobble."""

    dy: float
    dx: float
    amplitude: float = 0.0
    period: float = 8.0


DEFAULT_MOTIONS = (
    Motion(0.0, 3.0),
    Motion(0.0, -3.0),
    Motion(3.0, 0.0),
    Motion(-3.0, 0.0),
)


@dataclass
class SynthTaskSpec:
    num_classes: int = 4
    clips_per_class: int = 50
    full_size: tuple[int, int, int] = (16, 64, 64)
    motions: tuple[Motion, ...] = DEFAULT_MOTIONS
    object_size: int = 14
    noise: float = 12.0
    seed: int = 0

    def __post_init__(self):
        self.motions = tuple(m if isinstance(m, Motion) else Motion(**m) for m in self.motions)
        self.full_size = tuple(self.full_size)
        if self.num_classes < 2 or self.clips_per_class < 1:
            raise ValueError("need at least 2 classes and 1 clip per class")
        if len(self.motions) < self.num_classes:
            raise ValueError(f"{self.num_classes} classes but only {len(self.motions)} motions")
        if self.object_size >= min(self.full_size[1:]):
            raise ValueError("object larger than the frame")

    def to_dict(self):
        d = asdict(self)
        d["full_size"] = list(self.full_size)
        return d


def _render(motion: Motion, spec: SynthTaskSpec, rng: np.random.Generator) -> np.ndarray:
    t_full, h, w = spec.full_size
    yy, xx = np.mgrid[0:h, 0:w]
    # low-frequency textured background, same distribution for all classes
    base = rng.uniform(30, 90, size=3)
    bg = base[:, None, None] + 20 * np.sin(
        2 * np.pi * (xx[None] * rng.uniform(0.5, 2) / w + yy[None] * rng.uniform(0.5, 2) / h + rng.uniform(0, 1, (3, 1, 1)))
    )
    color = rng.uniform(170, 255, size=3)
    y0, x0 = rng.uniform(0, h), rng.uniform(0, w)
    phase = rng.uniform(0, 2 * np.pi)
    frames = np.empty((3, t_full, h, w))
    half = spec.object_size / 2
    for t in range(t_full):
        wob = motion.amplitude * np.sin(2 * np.pi * t / motion.period + phase)
        cy = (y0 + motion.dy * t + wob * (motion.dx != 0)) % h
        cx = (x0 + motion.dx * t + wob * (motion.dy != 0)) % w
        # toroidal distance keeps the square whole across the wrap
        dy = np.abs((yy - cy + h / 2) % h - h / 2)
        dx = np.abs((xx - cx + w / 2) % w - w / 2)
        mask = (dy < half) & (dx < half)
        frames[:, t] = np.where(mask[None], color[:, None, None], bg)
    frames += rng.normal(0, spec.noise, size=frames.shape)
    return np.clip(np.rint(frames), 0, 255).astype(np.uint8)


def gen_dataset(spec: SynthTaskSpec) -> list[VideoClip]:
    """Balanced, deterministic dataset ordered class-major."""
    root = Rng(spec.seed)
    out = []
    for label in range(spec.num_classes):
        for i in range(spec.clips_per_class):
            g = root.split(label).split(i).generator
            out.append(VideoClip(_render(spec.motions[label], spec, g), label))
    return out


def split_dataset(videos: list[VideoClip], holdout: float = 0.25, seed: int = 0):
    """Stratified train / held-out split."""
    rng = Rng(seed).generator
    train, test = [], []
    labels = sorted({v.label for v in videos})
    for lab in labels:
        group = [v for v in videos if v.label == lab]
        idx = rng.permutation(len(group))
        n_test = max(1, int(round(holdout * len(group))))
        test += [group[i] for i in sorted(idx[:n_test])]
        train += [group[i] for i in sorted(idx[n_test:])]
    return train, test


# ----------------------------------------------------------------------------
# Clip file: b"CSNV", u32 version, u32 T, u32 H, u32 W, u32 label, then
# 3*T*H*W bytes of uint8 planes in (channel, t, h, w) order. Little-endian.

CLIP_MAGIC = b"CSNV"
CLIP_VERSION = 1
_HEADER = struct.Struct("<4s5I")


class ClipFormatError(ValueError):
    pass


def write_clip(path, clip: VideoClip):
    _, t, h, w = clip.frames.shape
    Path(path).write_bytes(
        _HEADER.pack(CLIP_MAGIC, CLIP_VERSION, t, h, w, int(clip.label))
        + np.ascontiguousarray(clip.frames).tobytes()
    )


def read_clip(path) -> VideoClip:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ClipFormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, t, h, w, label = _HEADER.unpack_from(data)
    if magic != CLIP_MAGIC:
        raise ClipFormatError(f"{path}: bad magic {magic!r}")
    if version != CLIP_VERSION:
        raise ClipFormatError(f"{path}: unsupported version {version}")
    n = 3 * t * h * w
    if len(data) != _HEADER.size + n:
        raise ClipFormatError(f"{path}: expected {n} pixel bytes, found {len(data) - _HEADER.size}")
    frames = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size).reshape(3, t, h, w).copy()
    return VideoClip(frames, label)


def save_dataset(root, videos: list[VideoClip], spec: SynthTaskSpec | None = None):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, v in enumerate(videos):
        name = f"clip_{i:05d}.csnv"
        write_clip(root / name, v)
        entries.append({"path": name, "label": v.label})
    manifest = {"clips": entries, "seed": spec.seed if spec else None, "task": spec.to_dict() if spec else None}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(root) -> list[VideoClip]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    out = []
    for e in manifest["clips"]:
        clip = read_clip(root / e["path"])
        if clip.label != e["label"]:
            raise ClipFormatError(f"{e['path']}: label {clip.label} disagrees with manifest {e['label']}")
        out.append(clip)
    return out


# ----------------------------------------------------------------------------
# Sampling


@dataclass(frozen=True)
class SampleSpec:
    clip_len: int = 4
    skip: int = 2
    scale_range: tuple[int, int] = (36, 48)
    crop: int = 32
    eval_scale: int | None = None

    def __post_init__(self):
        lo, hi = self.scale_range
        if lo > hi:
            raise ValueError(f"scale range {self.scale_range} is inverted")
        if self.crop > lo:
            raise ValueError(f"crop {self.crop} exceeds the smallest scaled short edge {lo}")
        if self.eval_scale is not None and self.crop > self.eval_scale:
            raise ValueError("crop exceeds eval scale")
        if self.clip_len < 1 or self.skip < 1:
            raise ValueError("clip_len and skip must be positive")

    @property
    def span(self) -> int:
        return self.clip_len * self.skip

    @property
    def test_scale(self) -> int:
        return self.eval_scale if self.eval_scale is not None else self.scale_range[0]


class VideoTooShortError(ValueError):
    pass


def _max_start(video: VideoClip, sample: SampleSpec) -> int:
    t_full = video.frames.shape[1]
    if t_full < sample.span:
        raise VideoTooShortError(f"video has {t_full} frames, clip needs {sample.span}")
    return t_full - sample.span


def _resize_axis(a: np.ndarray, out: int, axis: int) -> np.ndarray:
    """Linear resampling along one axis with half-pixel centers and edge clamping."""
    n = a.shape[axis]
    if out == n:
        return a
    pos = (np.arange(out) + 0.5) * (n / out) - 0.5
    pos = np.clip(pos, 0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = (pos - lo).astype(a.dtype)
    shape = [1] * a.ndim
    shape[axis] = out
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1 - frac) + np.take(a, hi, axis=axis) * frac


def resize_short_edge(frames: np.ndarray, short: int) -> np.ndarray:
    """Bilinear resize of ``(..., H, W)`` so that ``min(H, W) == short``."""
    h, w = frames.shape[-2:]
    if h <= w:
        nh, nw = short, int(round(w * short / h))
    else:
        nh, nw = int(round(h * short / w)), short
    out = _resize_axis(frames, nh, frames.ndim - 2)
    return _resize_axis(out, nw, frames.ndim - 1)


def normalize(x: np.ndarray) -> np.ndarray:
    """uint8-range floats to normalized inputs."""
    return ((x / 255.0 - MEAN) / STD).astype(DTYPE)


def denormalize(x: np.ndarray) -> np.ndarray:
    return (x.astype(np.float64) * STD + MEAN) * 255.0


def _frames_at(video: VideoClip, start: int, sample: SampleSpec) -> np.ndarray:
    idx = start + sample.skip * np.arange(sample.clip_len)
    return video.frames[:, idx].astype(np.float32)


def sample_train_clip(video: VideoClip, sample: SampleSpec, rng: Rng) -> np.ndarray:
    """One jittered training clip of shape ``(1, 3, T, crop, crop)``."""
    g = rng.generator
    start = int(g.integers(0, _max_start(video, sample) + 1))
    lo, hi = sample.scale_range
    s = int(g.integers(lo, hi + 1))
    frames = resize_short_edge(_frames_at(video, start, sample), s)
    h, w = frames.shape[-2:]
    y = int(g.integers(0, h - sample.crop + 1))
    x = int(g.integers(0, w - sample.crop + 1))
    crop = frames[..., y : y + sample.crop, x : x + sample.crop]
    return normalize(crop)[None]


def eval_offsets(max_start: int, n_clips: int) -> list[int]:
    if n_clips < 1:
        raise ValueError("n_clips must be positive")
    if n_clips == 1:
        return [max_start // 2]
    return [int(round(v)) for v in np.linspace(0, max_start, n_clips)]


def sample_eval_clips(video: VideoClip, sample: SampleSpec, n_clips: int = 10) -> list[np.ndarray]:
    """Center crops of ``n_clips`` evenly spaced clips at the fixed eval scale."""
    offsets = eval_offsets(_max_start(video, sample), n_clips)
    out = []
    for start in offsets:
        frames = resize_short_edge(_frames_at(video, start, sample), sample.test_scale)
        h, w = frames.shape[-2:]
        y = (h - sample.crop) // 2
        x = (w - sample.crop) // 2
        out.append(normalize(frames[..., y : y + sample.crop, x : x + sample.crop])[None])
    return out
