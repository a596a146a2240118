"""Minimal numpy neural-network engine: layer kernels, sequential network, SGD, gradient checks."""
from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .functional import (
    ShapeError,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dropout,
    maxpool_backward,
    maxpool_forward,
    softmax,
    softmax_cross_entropy,
)
from .gradcheck import GradCheckReport, compare_gradients, gradient_check
from .network import LayerSpec, Network
from .optim import OptimizerState, sgd_step

__all__ = [
    "CheckpointError", "GradCheckReport", "LayerSpec", "Network", "OptimizerState", "ShapeError",
    "batchnorm_backward", "batchnorm_forward", "compare_gradients", "conv2d_backward",
    "conv2d_forward", "dropout", "gradient_check", "load_checkpoint", "maxpool_backward",
    "maxpool_forward", "read_checkpoint", "save_checkpoint", "sgd_step", "softmax",
    "softmax_cross_entropy",
]
