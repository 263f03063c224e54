"""From-scratch 3D CNN with reverse-mode autograd."""
from .model import (
    CheckpointError,
    ConvBlock,
    Model,
    ModelConfig,
    default_blocks,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import Tensor, softmax
from .train import Adam, FoldResult, Metrics, TrainConfig, evaluate, evaluate_model, train, train_fold, write_curves

__all__ = [
    "Adam",
    "CheckpointError",
    "ConvBlock",
    "FoldResult",
    "Metrics",
    "Model",
    "ModelConfig",
    "Tensor",
    "TrainConfig",
    "default_blocks",
    "evaluate",
    "evaluate_model",
    "load_checkpoint",
    "save_checkpoint",
    "softmax",
    "train",
    "train_fold",
    "write_curves",
]
