"""Exact parameter and multiply-accumulate accounting.

MAC convention: one MAC counts as one FLOP. Convolutions cost
Cout * Cin/groups * kh * kw * H' * W', linear layers in * out per token, and the
two attention products T^2 * d per head each. Normalizations, activations,
softmax, pooling and elementwise ops are free.

Two totals are reported. ``total_macs`` includes the attention products.
``module_macs`` counts only conv and linear layers, which is what forward-hook
based counters see (they cannot observe the functional ``q @ k^T`` and
``attn @ v`` products). The published GFLOPs of the DHVT variants follow the
latter convention.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Optional

from .model import ModelConfig
from .numerics import ParamStore
from .sope import stage_widths

ATTN_PRODUCT_SUFFIXES = (".attn.scores", ".attn.weighted_sum")


@dataclass
class CostReport:
    params: Dict[str, int] = field(default_factory=OrderedDict)
    macs: Dict[str, int] = field(default_factory=OrderedDict)
    config: Optional[dict] = None

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    @property
    def attention_product_macs(self) -> int:
        return sum(v for k, v in self.macs.items() if k.endswith(ATTN_PRODUCT_SUFFIXES))

    @property
    def module_macs(self) -> int:
        return self.total_macs - self.attention_product_macs

    @property
    def gflops(self) -> float:
        """Hook-counter convention (conv and linear layers only), in 1e9 MACs."""
        return self.module_macs / 1e9

    @property
    def gflops_with_attention(self) -> float:
        return self.total_macs / 1e9

    def rollup(self, which: str = "params", depth: int = 1) -> Dict[str, int]:
        """Sum leaves sharing the first `depth` dotted name components."""
        src = self.params if which == "params" else self.macs
        out: Dict[str, int] = OrderedDict()
        for name, v in src.items():
            key = ".".join(name.split(".")[:depth])
            out[key] = out.get(key, 0) + v
        return out

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "module_macs": self.module_macs,
            "attention_product_macs": self.attention_product_macs,
            "gflops": self.gflops,
            "gflops_with_attention": self.gflops_with_attention,
            "params": dict(self.params),
            "macs": dict(self.macs),
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_text(self, depth: int = 2) -> str:
        lines = []
        if self.params:
            roll = self.rollup("params", depth)
            w = max(len(k) for k in roll)
            lines.append(f"{'parameters':<{w}}  {'count':>12}")
            lines += [f"{k:<{w}}  {v:>12,}" for k, v in roll.items()]
            lines.append(f"{'total':<{w}}  {self.total_params:>12,}  ({self.total_params / 1e6:.2f}M)")
        if self.macs:
            if lines:
                lines.append("")
            roll = self.rollup("macs", depth)
            w = max(max(len(k) for k in roll), len("total (conv+linear)"))
            lines.append(f"{'MACs (batch 1)':<{w}}  {'count':>15}")
            lines += [f"{k:<{w}}  {v:>15,}" for k, v in roll.items()]
            lines.append(f"{'total (conv+linear)':<{w}}  {self.module_macs:>15,}  ({self.gflops:.3f} GFLOPs)")
            lines.append(f"{'total (+attention)':<{w}}  {self.total_macs:>15,}  "
                         f"({self.gflops_with_attention:.3f} GFLOPs)")
        return "\n".join(lines)


def count_params(ps: ParamStore, config: Optional[ModelConfig] = None) -> CostReport:
    """Exact element count of every trainable tensor, keyed by tensor name."""
    params = OrderedDict((name, t.size) for name, t in ps.trainable())
    return CostReport(params=params, config=None if config is None else config.to_dict())


def conv_macs(cin: int, cout: int, k: int, h_out: int, w_out: int, groups: int = 1) -> int:
    return cout * (cin // groups) * k * k * h_out * w_out


def count_macs(cfg: ModelConfig) -> CostReport:
    """Analytic MAC count of one forward pass on a single image."""
    cfg.validate()
    macs: Dict[str, int] = OrderedDict()
    D, h, d = cfg.embed_dim, cfg.num_heads, cfg.head_dim
    Dh = cfg.hidden_dim
    H, W = cfg.image_size
    N = cfg.num_patches
    if cfg.use_sope:
        widths = stage_widths(cfg.patch_size, D, cfg.in_chans)
        hh, ww = H, W
        for i, (cin, cout) in enumerate(zip(widths, widths[1:])):
            hh, ww = (hh + 2 - 3) // 2 + 1, (ww + 2 - 3) // 2 + 1
            macs[f"sope.stages.{i}.conv"] = conv_macs(cin, cout, 3, hh, ww)
    else:
        gh, gw = cfg.grid
        macs["patch_embed.proj"] = conv_macs(cfg.in_chans, D, cfg.patch_size, gh, gw)

    T0 = N + 1
    T = T0 + (h if cfg.use_head_token else 0)
    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        if cfg.use_head_token:
            macs[f"{pre}.attn.ht_proj"] = h * d * D
        macs[f"{pre}.attn.qkv"] = T * D * 3 * D
        macs[f"{pre}.attn.scores"] = h * T * T * d
        macs[f"{pre}.attn.weighted_sum"] = h * T * T * d
        macs[f"{pre}.attn.proj"] = T * D * D
        kind = cfg.ffn_kind
        if kind == "daff":
            side = cfg.grid[0]
            macs[f"{pre}.mlp.conv1"] = conv_macs(D, Dh, 1, side, side)
            macs[f"{pre}.mlp.dwconv"] = conv_macs(Dh, Dh, 3, side, side, groups=Dh)
            macs[f"{pre}.mlp.conv3"] = conv_macs(Dh, D, 1, side, side)
            macs[f"{pre}.mlp.compress"] = D * (D // cfg.se_ratio)
            macs[f"{pre}.mlp.excitation"] = (D // cfg.se_ratio) * D
        else:
            tokens = T0 if kind == "mlp" else N
            macs[f"{pre}.mlp.fc1"] = tokens * D * Dh
            macs[f"{pre}.mlp.fc2"] = tokens * Dh * D
            if kind == "split_cls_agg":
                macs[f"{pre}.mlp.compress"] = D * (D // cfg.se_ratio)
                macs[f"{pre}.mlp.excitation"] = (D // cfg.se_ratio) * D
    macs["head"] = D * cfg.num_classes
    return CostReport(macs=macs, config=cfg.to_dict())


def cost_report(ps: ParamStore, cfg: ModelConfig) -> CostReport:
    """Parameters of a built model together with the analytic MACs of its config."""
    rep = count_macs(cfg)
    rep.params = count_params(ps).params
    return rep
