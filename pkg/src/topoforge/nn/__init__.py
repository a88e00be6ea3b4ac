from .layers import (
    BatchNorm2d,
    Conv2d,
    LayerStateError,
    MaxPool2,
    Param,
    PlainResBlock,
    ReLU,
    Sigmoid,
    Spade,
    SpadeResBlock,
    UpsampleNearest2,
    downsample_stride,
    mae_loss,
)
from .optim import Adam
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "Adam", "BatchNorm2d", "CheckpointError", "Conv2d", "LayerStateError",
    "MaxPool2", "Param", "PlainResBlock", "ReLU", "Sigmoid", "Spade",
    "SpadeResBlock", "UpsampleNearest2", "downsample_stride", "load_checkpoint",
    "mae_loss", "save_checkpoint",
]
