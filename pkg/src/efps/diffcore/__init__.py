"""Minimal dense-tensor autodiff core: tensors, layers, optimizer, schedule."""

from .tensor import (
    DiffError,
    Tensor,
    batch_norm,
    cat,
    conv2d,
    downsample2x,
    no_grad,
    upsample2x,
)
from .layers import BatchNorm2d, Conv2d, Linear, Module
from .optim import Adam, AdamState, adam_step, cosine_lr

__all__ = [
    "Adam",
    "AdamState",
    "BatchNorm2d",
    "Conv2d",
    "DiffError",
    "Linear",
    "Module",
    "Tensor",
    "adam_step",
    "batch_norm",
    "cat",
    "conv2d",
    "cosine_lr",
    "downsample2x",
    "no_grad",
    "upsample2x",
]
