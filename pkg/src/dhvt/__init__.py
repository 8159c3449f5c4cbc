"""Dynamic Hybrid Vision Transformer on a small numpy autodiff engine."""

from .accounting import CostReport, count_macs, count_params, cost_report
from .daff import DaffParams, daff_forward
from .hi_mhsa import HiMhsaParams, hi_mhsa_forward, make_head_tokens
from .model import (
    TABLE_12,
    ModelConfig,
    baseline_of,
    bind_model,
    build_model,
    encoder_block_forward,
    micro_config,
    model_forward,
    table5_configs,
    table6_configs,
    variant_factory,
    variant_names,
)
from .numerics import ParamStore, Tape, Tensor, backward
from .sope import SopeParams, affine, sope_forward

__version__ = "0.1.0"

__all__ = [
    "CostReport", "DaffParams", "HiMhsaParams", "ModelConfig", "ParamStore", "SopeParams", "TABLE_12",
    "Tape", "Tensor", "affine", "backward", "baseline_of", "bind_model", "build_model", "count_macs",
    "count_params", "cost_report", "daff_forward", "encoder_block_forward", "hi_mhsa_forward",
    "make_head_tokens", "micro_config", "model_forward", "sope_forward", "table5_configs",
    "table6_configs", "variant_factory", "variant_names",
]
