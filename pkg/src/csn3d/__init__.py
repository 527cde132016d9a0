"""Channel-separated 3D convolutional networks in NumPy."""

from .analyzer import model_report, sweep_stats
from .data import SampleSpec, SynthTaskSpec, VideoClip, gen_dataset
from .estimator import CSNVideoClassifier
from .trainer import TrainConfig, evaluate, train
from .zoo import ArchSpec, BlockKind, Model, build_arch, named_arch

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "BlockKind", "CSNVideoClassifier", "Model", "SampleSpec", "SynthTaskSpec", "TrainConfig",
    "VideoClip", "build_arch", "evaluate", "gen_dataset", "model_report", "named_arch", "sweep_stats", "train",
]
