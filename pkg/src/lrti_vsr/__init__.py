"""Recurrent video super-resolution with refocused window attention and truncated BPTT training."""

from .autodiff import Tensor, backward, grad_check, no_grad
from .data import SyntheticSpec, VideoSequence, generate, load_dataset
from .model import ModelConfig, ModelWeights, forward_clip, forward_full, load_checkpoint, save_checkpoint
from .training import TrainConfig, compare_strategies, evaluate, train_loop

__all__ = [
    "ModelConfig",
    "ModelWeights",
    "SyntheticSpec",
    "Tensor",
    "TrainConfig",
    "VideoSequence",
    "backward",
    "compare_strategies",
    "evaluate",
    "forward_clip",
    "forward_full",
    "generate",
    "grad_check",
    "load_checkpoint",
    "load_dataset",
    "no_grad",
    "save_checkpoint",
    "train_loop",
]

__version__ = "0.1.0"
