"""Minimal numpy autodiff engine used by every stage of the pipeline."""
from .checkpoint import FormatError, atomic_write_bytes, load_checkpoint, save_checkpoint
from .losses import activation_cosine, ce_loss, kl_loss, pram_loss
from .nn import (
    BatchNormState,
    ConfigError,
    MultiBatchNorm,
    avg_pool2d,
    batchnorm,
    conv2d,
    linear,
    masked_relu,
    max_pool2d,
    relu,
)
from .optim import SGD, SgdConfig, sgd_step
from .rng import substream
from .tensor import DTYPE, Tensor, add, flatten, no_grad, reshape, scale, slice_prefix

__all__ = [
    "DTYPE", "Tensor", "add", "flatten", "no_grad", "reshape", "scale", "slice_prefix",
    "conv2d", "linear", "batchnorm", "MultiBatchNorm", "BatchNormState", "ConfigError",
    "relu", "masked_relu", "avg_pool2d", "max_pool2d",
    "ce_loss", "kl_loss", "pram_loss", "activation_cosine",
    "SGD", "SgdConfig", "sgd_step", "substream",
    "save_checkpoint", "load_checkpoint", "atomic_write_bytes", "FormatError",
]
