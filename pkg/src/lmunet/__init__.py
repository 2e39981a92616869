"""Lightweight state-space U-Net for 2D/3D segmentation, built from scratch on
a minimal tape-autodiff tensor core."""

from .network import NetworkConfig, apply_ablation, build, default_config, forward
from .tensor import Tape, Tensor, backward
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "NetworkConfig", "TrainConfig", "Tape", "Tensor",
    "apply_ablation", "backward", "build", "default_config",
    "evaluate", "forward", "train", "__version__",
]
