"""Small numpy neural-network engine: layers, loss, AdamW, checkpoints."""
from .functional import (conv2d_batch, conv2d_forward, cross_entropy_batch,
                         cross_entropy_label_smooth, log_softmax, softmax)
from .layers import (BatchNorm2d, Conv2d, Dense, Dropout, GlobalAvgPool, Layer,
                     MaxPool2d, Parameter, ReLU, Sequential)
from .optim import AdamW, LRSchedule, lr_schedule
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "AdamW", "BatchNorm2d", "Conv2d", "Dense", "Dropout", "GlobalAvgPool", "Layer",
    "LRSchedule", "MaxPool2d", "Parameter", "ReLU", "Sequential", "conv2d_batch",
    "conv2d_forward", "cross_entropy_batch", "cross_entropy_label_smooth",
    "load_checkpoint", "log_softmax", "lr_schedule", "save_checkpoint", "softmax",
]
