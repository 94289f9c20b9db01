"""From-scratch 3D CNN: layers, model, optimizer, checkpoints."""

from .layers import (
    BCE_EPSILON,
    BatchNorm3d,
    Conv3d,
    Dense,
    MaxPool3d,
    bce_loss,
    dropout_backward,
    dropout_forward,
    gap_backward,
    gap_forward,
    relu_backward,
    relu_forward,
    sigmoid_backward,
    sigmoid_forward,
)
from .model import (
    DEFAULT_INPUT_DIMS,
    DEFAULT_TOTAL_PARAMS,
    DEFAULT_TRAINABLE_PARAMS,
    Architecture,
    Cnn3d,
)
from .optim import Adam
from .checkpoint import load_model, read_tensors, save_model, write_tensors

__all__ = [
    "Architecture",
    "Cnn3d",
    "Adam",
    "BatchNorm3d",
    "Conv3d",
    "Dense",
    "MaxPool3d",
    "BCE_EPSILON",
    "bce_loss",
    "dropout_forward",
    "dropout_backward",
    "gap_forward",
    "gap_backward",
    "relu_forward",
    "relu_backward",
    "sigmoid_forward",
    "sigmoid_backward",
    "DEFAULT_INPUT_DIMS",
    "DEFAULT_TRAINABLE_PARAMS",
    "DEFAULT_TOTAL_PARAMS",
    "save_model",
    "load_model",
    "read_tensors",
    "write_tensors",
]
