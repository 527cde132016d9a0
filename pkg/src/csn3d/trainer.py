"""Single-host SGD training with linear warmup and half-cosine decay."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import SampleSpec, VideoClip, sample_eval_clips, sample_train_clip
from .ops import softmax, softmax_xent
from .tensor import Rng
from .zoo import Model, NonFiniteError, save_model

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 50.0


@dataclass
class TrainConfig:
    base_lr: float = 0.05
    warmup_epochs: int = 1
    total_epochs: int = 30
    iters_per_epoch: int = 50
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        for name in ("total_epochs", "iters_per_epoch", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must lie in [0, total_epochs)")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")

    @property
    def total_iters(self) -> int:
        return self.total_epochs * self.iters_per_epoch

    @property
    def warmup_iters(self) -> int:
        return self.warmup_epochs * self.iters_per_epoch


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Learning rate for iteration ``it`` (0-based).

    Warmup ramps linearly from ``base_lr / W`` at iteration 0 to ``base_lr`` at
    iteration ``W - 1``; from iteration ``W`` on the rate follows
    ``base_lr * (1 + cos(pi * p)) / 2`` with ``p = (it - W) / (N - W)``.
    """
    if it < 0:
        raise ValueError("iteration must be non-negative")
    w, n = cfg.warmup_iters, cfg.total_iters
    if it < w:
        return cfg.base_lr * (it + 1) / w
    p = min((it - w) / (n - w), 1.0)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * p))


def decays(name: str) -> bool:
    """Weight decay applies to conv and fc weights only."""
    return name.endswith(".weight") and ".bn." not in name


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float, weight_decay: float):
    """In-place momentum SGD: ``v = m*v + g + wd*p``; ``p -= lr*v``."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ValueError(f"{name}: velocity shape {v.shape} != parameter shape {p.shape}")
        v *= momentum
        v += g
        if weight_decay and decays(name):
            v += weight_decay * p
        p -= (lr * v).astype(p.dtype)
    return params, velocity


@dataclass
class RunHistory:
    iters: list[int] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    train_err: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    clips_seen: int = 0

    def record(self, it, lr, loss, err):
        if self.iters and it <= self.iters[-1]:
            raise ValueError("iterations must be strictly increasing")
        self.iters.append(it)
        self.lr.append(lr)
        self.loss.append(loss)
        self.train_err.append(err)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("iter", "lr", "loss", "train_err"))
        for row in zip(self.iters, self.lr, self.loss, self.train_err):
            w.writerow((row[0], repr(row[1]), repr(row[2]), repr(row[3])))
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True) + "\n"

    def smoothed_err(self, window: int = 50) -> np.ndarray:
        e = np.asarray(self.train_err, dtype=float)
        if len(e) < window:
            return e
        return np.convolve(e, np.ones(window) / window, mode="valid")


def _batch(videos, labels, sample: SampleSpec, rng: Rng, batch_size: int):
    g = rng.generator
    idx = g.integers(0, len(videos), size=batch_size)
    clips = [sample_train_clip(videos[i], sample, rng.split(k)) for k, i in enumerate(idx)]
    return np.concatenate(clips, axis=0), labels[idx]


def _diagnose(model: Model, x) -> str:
    try:
        model.forward(x, train=False, check_finite=True)
    except NonFiniteError as err:
        return err.layer
    return "loss"


def train(model: Model, videos: list[VideoClip], cfg: TrainConfig, sample: SampleSpec = SampleSpec(),
          eval_set: list[VideoClip] | None = None, n_eval_clips: int = 10, progress=None):
    """Train ``model`` in place; return ``(model, history)``."""
    if not videos:
        raise ValueError("training set is empty")
    labels = np.array([v.label for v in videos])
    params = model.params()
    velocity: dict[str, np.ndarray] = {}
    history = RunHistory()
    root = Rng(cfg.seed).split(7)
    for it in range(cfg.total_iters):
        x, y = _batch(videos, labels, sample, root.split(it), cfg.batch_size)
        logits = model.forward(x, train=True)
        loss, grad = softmax_xent(logits, y)
        if not math.isfinite(loss) or abs(loss) > DIVERGENCE_LIMIT:
            layer = _diagnose(model, x)
            raise FloatingPointError(f"loss {loss} at iteration {it}; first non-finite layer: {layer}")
        model.backward(grad.astype(logits.dtype))
        lr = lr_at(it, cfg)
        sgd_step(params, model.grads(), velocity, lr, cfg.momentum, cfg.weight_decay)
        err = float(np.mean(logits.argmax(axis=1) != y))
        history.record(it, lr, loss, err)
        history.clips_seen += len(y)
        step = it + 1
        if cfg.eval_every and eval_set and step % cfg.eval_every == 0:
            clip1, video1 = evaluate(model, eval_set, sample, n_eval_clips)
            history.evals.append({"iter": it, "clip@1": clip1, "video@1": video1})
        if cfg.checkpoint_every and cfg.checkpoint_dir and step % cfg.checkpoint_every == 0:
            Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_model(Path(cfg.checkpoint_dir) / f"iter_{step:06d}.csnw", model)
        if progress:
            progress(it, loss, lr)
    return model, history


def predict_videos(model: Model, videos: list[VideoClip], sample: SampleSpec = SampleSpec(), n_clips: int = 10):
    """Per-clip softmax arrays, shape ``(videos, n_clips, classes)``."""
    out = []
    for v in videos:
        x = np.concatenate(sample_eval_clips(v, sample, n_clips), axis=0)
        out.append(softmax(model.forward(x, train=False).astype(np.float64)))
    return np.stack(out)


def accuracy_from_probs(probs: np.ndarray, labels) -> tuple[float, float]:
    """``(clip@1, video@1)`` from per-clip probabilities ``(videos, clips, classes)``."""
    labels = np.asarray(labels)
    clip1 = float(np.mean(probs.argmax(axis=2) == labels[:, None]))
    video1 = float(np.mean(probs.mean(axis=1).argmax(axis=1) == labels))
    return clip1, video1


def evaluate(model: Model, videos: list[VideoClip], sample: SampleSpec = SampleSpec(), n_clips: int = 10):
    if not videos:
        raise ValueError("evaluation set is empty")
    probs = predict_videos(model, videos, sample, n_clips)
    return accuracy_from_probs(probs, [v.label for v in videos])
