"""Dynamic aggregation feed-forward.

Patch tokens go through a 1x1 / depth-wise 3x3 / 1x1 conv stack on their
square grid (with a shortcut around the depth-wise conv). The class token
skips the convs; it is rescaled channel-wise by a squeeze-excitation weight
pooled from the conv output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .numerics import (
    ChannelNorm,
    ConfigError,
    ConvParams,
    Initializer,
    LinearParams,
    ParamStore,
    ShapeError,
    Tensor,
    concat,
    gelu,
)


@dataclass
class DaffParams:
    conv1: ConvParams
    norm1: ChannelNorm
    dwconv: ConvParams
    norm2: ChannelNorm
    conv3: ConvParams
    norm3: ChannelNorm
    compress: LinearParams
    excitation: LinearParams
    agg_on_all_tokens: bool = False
    disable_dw_shortcut: bool = False

    @property
    def dim(self) -> int:
        return self.conv1.weight.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.conv1.weight.shape[0]


def daff_init(store: ParamStore, prefix: str, dim: int, init: Initializer, mlp_ratio: float = 4,
              se_ratio: int = 4, norm: str = "bn", agg_on_all_tokens: bool = False,
              disable_dw_shortcut: bool = False) -> DaffParams:
    hidden = mlp_ratio * dim
    if hidden != int(hidden):
        raise ConfigError(f"mlp_ratio * dim must be integral, got {hidden}")
    hidden = int(hidden)
    if dim % se_ratio:
        raise ConfigError(f"dim {dim} not divisible by se_ratio {se_ratio}")
    ConvParams.create(store, f"{prefix}.conv1", dim, hidden, 1, init)
    ChannelNorm.create(store, f"{prefix}.norm1", hidden, norm, init)
    ConvParams.create(store, f"{prefix}.dwconv", hidden, hidden, 3, init, padding=1, groups=hidden)
    ChannelNorm.create(store, f"{prefix}.norm2", hidden, norm, init)
    ConvParams.create(store, f"{prefix}.conv3", hidden, dim, 1, init)
    ChannelNorm.create(store, f"{prefix}.norm3", dim, norm, init)
    LinearParams.create(store, f"{prefix}.compress", dim, dim // se_ratio, init)
    LinearParams.create(store, f"{prefix}.excitation", dim // se_ratio, dim, init)
    return daff_bind(store, prefix, norm, agg_on_all_tokens, disable_dw_shortcut)


def daff_bind(store: ParamStore, prefix: str, norm: str = "bn", agg_on_all_tokens: bool = False,
              disable_dw_shortcut: bool = False) -> DaffParams:
    hidden = store[f"{prefix}.dwconv.weight"].shape[0]
    return DaffParams(
        ConvParams.bind(store, f"{prefix}.conv1"),
        ChannelNorm.bind(store, f"{prefix}.norm1", norm),
        ConvParams.bind(store, f"{prefix}.dwconv", padding=1, groups=hidden),
        ChannelNorm.bind(store, f"{prefix}.norm2", norm),
        ConvParams.bind(store, f"{prefix}.conv3"),
        ChannelNorm.bind(store, f"{prefix}.norm3", norm),
        LinearParams.bind(store, f"{prefix}.compress"),
        LinearParams.bind(store, f"{prefix}.excitation"),
        agg_on_all_tokens,
        disable_dw_shortcut,
    )


def tokens_to_grid(tokens: Tensor) -> Tensor:
    """(B, N, D) row-major tokens -> (B, D, sqrt N, sqrt N) map."""
    b, n, d = tokens.shape
    side = math.isqrt(n)
    if side * side != n:
        raise ShapeError(f"{n} patch tokens do not form a square grid")
    return tokens.transpose(0, 2, 1).reshape(b, d, side, side)


def grid_to_tokens(x: Tensor) -> Tensor:
    b, d = x.shape[:2]
    return x.reshape(b, d, -1).transpose(0, 2, 1)


def squeeze_excite(p: DaffParams, fmap: Tensor) -> Tensor:
    """Channel weight (B, 1, D) from the spatial mean of `fmap` (no closing sigmoid)."""
    b, d = fmap.shape[:2]
    pooled = fmap.mean(axis=(2, 3)).reshape(b, 1, d)
    return p.excitation(gelu(p.compress(pooled)))


def daff_forward(p: DaffParams, x: Tensor, train: bool, update_stats: bool = True) -> Tensor:
    """Apply DAFF to a class-token-first (B, N+1, D) sequence."""
    if x.ndim != 3 or x.shape[1] < 2:
        raise ValueError(f"daff_forward needs a class token plus patch tokens, got shape {x.shape}")
    cls_tok = x[:, 0:1]
    t = tokens_to_grid(x[:, 1:])
    t = gelu(p.norm1(p.conv1(t), train, update_stats))
    branch = gelu(p.norm2(p.dwconv(t), train, update_stats))
    t = branch if p.disable_dw_shortcut else t + branch
    y = p.norm3(p.conv3(t), train, update_stats)
    weight = squeeze_excite(p, y)
    tokens = grid_to_tokens(y)
    if p.agg_on_all_tokens:
        tokens = tokens * weight
    return concat([cls_tok * weight, tokens], axis=1)
