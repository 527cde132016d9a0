"""scikit-learn compatible front end for training and applying CSN models."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import SampleSpec, VideoClip
from .trainer import TrainConfig, predict_videos, train
from .zoo import Model, named_arch


def check_videos(X, min_frames: int = 1) -> list[np.ndarray]:
    """Validate raw videos: a uint8 array ``(n, 3, T, H, W)`` or a sequence of
    ``(3, T, H, W)`` uint8 arrays (lengths may differ)."""
    if isinstance(X, np.ndarray) and X.ndim == 5:
        videos = list(X)
    else:
        videos = [np.asarray(v) for v in X]
    if not videos:
        raise ValueError("expected at least one video")
    for i, v in enumerate(videos):
        if v.ndim != 4 or v.shape[0] != 3:
            raise ValueError(f"video {i}: expected shape (3, T, H, W), got {v.shape}")
        if v.dtype != np.uint8:
            raise ValueError(f"video {i}: expected uint8 pixels, got {v.dtype}")
        if v.shape[1] < min_frames:
            raise ValueError(f"video {i}: {v.shape[1]} frames, need at least {min_frames}")
    return videos


class CSNVideoClassifier(ClassifierMixin, BaseEstimator):
    """Video classifier trained with jittered clips and scored with averaged
    multi-clip softmax.

    Parameters mirror :class:`~csn3d.trainer.TrainConfig` and
    :class:`~csn3d.data.SampleSpec`; ``arch`` is any name accepted by
    :func:`~csn3d.zoo.named_arch` (``tiny-ip-csn`` by default).

    Attributes
    ----------
    classes_ : ndarray of original labels
    model_ : trained :class:`~csn3d.zoo.Model`
    history_ : :class:`~csn3d.trainer.RunHistory`
    """

    def __init__(self, arch="tiny-ip-csn", base_lr=0.05, warmup_epochs=1, epochs=30, iters_per_epoch=50,
                 batch_size=8, momentum=0.9, weight_decay=1e-4, clip_len=4, skip=2, scale_range=(36, 48),
                 crop=32, n_clips=10, random_state=0):
        self.arch = arch
        self.base_lr = base_lr
        self.warmup_epochs = warmup_epochs
        self.epochs = epochs
        self.iters_per_epoch = iters_per_epoch
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_len = clip_len
        self.skip = skip
        self.scale_range = scale_range
        self.crop = crop
        self.n_clips = n_clips
        self.random_state = random_state

    def _sample_spec(self) -> SampleSpec:
        return SampleSpec(self.clip_len, self.skip, tuple(self.scale_range), self.crop)

    def fit(self, X, y):
        sample = self._sample_spec()
        videos = check_videos(X, sample.span)
        y = np.asarray(y)
        if y.shape != (len(videos),):
            raise ValueError(f"y has shape {y.shape}, expected ({len(videos)},)")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        arch = named_arch(self.arch, num_classes=len(self.classes_), frames=self.clip_len)
        cfg = TrainConfig(
            base_lr=self.base_lr,
            warmup_epochs=self.warmup_epochs,
            total_epochs=self.epochs,
            iters_per_epoch=self.iters_per_epoch,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            seed=self.random_state,
        )
        clips = [VideoClip(v, int(lab)) for v, lab in zip(videos, encoded)]
        self.model_, self.history_ = train(Model(arch, seed=self.random_state), clips, cfg, sample)
        return self

    def predict_proba(self, X):
        """Softmax averaged over ``n_clips`` evenly spaced center crops."""
        check_is_fitted(self, "model_")
        sample = self._sample_spec()
        clips = [VideoClip(v, 0) for v in check_videos(X, sample.span)]
        return predict_videos(self.model_, clips, sample, self.n_clips).mean(axis=1)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]
