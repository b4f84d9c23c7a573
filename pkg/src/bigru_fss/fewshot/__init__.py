from .adapt import AdaptationError, adapt, adaptation_splits
from .checkpoint import FORMAT_VERSION, Checkpoint
from .config import TrainConfig
from .episode import (
    Case,
    Episode,
    InsufficientDataError,
    SupportEntry,
    augment_episode,
    build_episode,
    sample_episode,
)
from .model import episode_features, forward_episode, init_model
from .segment import segment_volume
from .train import TrainingDivergedError, initial_checkpoint, train

__all__ = [
    "AdaptationError", "Case", "Checkpoint", "Episode", "FORMAT_VERSION", "InsufficientDataError",
    "SupportEntry", "TrainConfig", "TrainingDivergedError", "adapt", "adaptation_splits",
    "augment_episode", "build_episode", "episode_features", "forward_episode", "init_model",
    "initial_checkpoint", "sample_episode", "segment_volume", "train",
]
