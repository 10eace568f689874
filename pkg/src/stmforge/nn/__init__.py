from .layers import (
    BatchNorm,
    ClippedReLU,
    Conv2D,
    Dense,
    Flatten,
    Layer,
    LeakyReLU,
    MaxPool2D,
    ReLU,
    Reshape,
    TConv2D,
    conv_out_size,
    tconv_out_size,
)
from .network import Sequential, load_checkpoint, mse_loss, save_checkpoint
from .optim import Adam, AdamState, NonFiniteError, adam_step

__all__ = [
    "Adam",
    "AdamState",
    "BatchNorm",
    "ClippedReLU",
    "Conv2D",
    "Dense",
    "Flatten",
    "Layer",
    "LeakyReLU",
    "MaxPool2D",
    "NonFiniteError",
    "ReLU",
    "Reshape",
    "Sequential",
    "TConv2D",
    "adam_step",
    "conv_out_size",
    "load_checkpoint",
    "mse_loss",
    "save_checkpoint",
    "tconv_out_size",
]
