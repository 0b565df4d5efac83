"""Small float64 differentiable core: layers, graphs, Adam, checkpoints."""
from .graph import Network, NonFiniteError, check_finite
from .layers import (
    AllocationHead,
    Branch,
    Conv1d,
    Dense,
    DuelingHead,
    Flatten,
    Layer,
    PerAsset,
    ReLU,
    ResidualBlock,
    Sequential,
    ShapeError,
    gaussian_log_prob,
    gaussian_log_prob_backward,
    softmax,
    softmax_backward,
)
from .optim import AdamState, adam_step, apply_adam, clip_by_global_norm, sgd_step
from .checkpoint import Checkpoint, CheckpointError, load_into, read, save

__all__ = [
    "AdamState", "AllocationHead", "Branch", "Checkpoint", "CheckpointError", "Conv1d",
    "Dense", "DuelingHead", "Flatten", "Layer", "Network", "NonFiniteError", "PerAsset",
    "ReLU", "ResidualBlock", "Sequential", "ShapeError", "adam_step", "apply_adam",
    "check_finite", "clip_by_global_norm", "gaussian_log_prob", "gaussian_log_prob_backward",
    "load_into", "read", "save", "sgd_step", "softmax", "softmax_backward",
]
