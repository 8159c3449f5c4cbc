"""Tensor engine: autodiff tape, layer primitives, kernels and AdamW."""

from . import kernels
from .functional import (
    BatchNormState,
    DegenerateBatchError,
    avg_pool3x3,
    batchnorm2d,
    conv2d,
    cross_entropy,
    dropout,
    gelu,
    layernorm,
    linear,
    softmax,
)
from .optim import AdamW, adamw_step, lr_at
from .params import (
    ChannelNorm,
    ConvParams,
    Initializer,
    LayerNormParams,
    LinearParams,
    ParamStore,
    ShapeOnlyInitializer,
    bind_batchnorm,
    create_batchnorm,
)
from .tensor import (
    ConfigError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    concat,
    matmul,
    mean,
    no_grad,
    set_debug,
)

__all__ = [
    "AdamW", "BatchNormState", "ChannelNorm", "ConfigError", "ConvParams", "DegenerateBatchError",
    "Initializer", "LayerNormParams", "LinearParams", "ParamStore", "ShapeError", "ShapeOnlyInitializer", "Tape", "Tensor",
    "adamw_step", "avg_pool3x3", "backward", "batchnorm2d", "bind_batchnorm", "concat", "conv2d",
    "create_batchnorm", "cross_entropy", "dropout", "gelu", "kernels", "layernorm", "linear", "lr_at",
    "matmul", "mean", "no_grad", "set_debug", "softmax",
]
