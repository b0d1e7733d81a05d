"""Mixture-of-domain-experts learning for generalizable live/spoof
classification, built on a from-scratch reverse-mode autodiff core."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, recording, set_default_dtype
from .model import AmelModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__all__ = [
    "Tape",
    "Tensor",
    "recording",
    "set_default_dtype",
    "AmelModel",
    "ModelConfig",
    "load_checkpoint",
    "save_checkpoint",
    "TrainConfig",
    "train",
    "__version__",
]
