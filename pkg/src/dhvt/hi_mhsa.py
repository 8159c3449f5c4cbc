"""Head-interacted multi-head self-attention.

Head tokens summarise each head's channel group across the whole sequence,
join the attention as extra keys/queries, and are averaged back into the
class token afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .numerics import (
    ConfigError,
    Initializer,
    LayerNormParams,
    LinearParams,
    ParamStore,
    Tensor,
    concat,
    dropout,
    gelu,
    softmax,
)


@dataclass
class HiMhsaParams:
    qkv: LinearParams
    proj: LinearParams
    num_heads: int
    ht_proj: Optional[LinearParams] = None
    ht_norm: Optional[LayerNormParams] = None
    head_embed: Optional[Tensor] = None
    attn_dropout: float = 0.0

    @property
    def dim(self) -> int:
        return self.proj.weight.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @property
    def scale(self) -> float:
        return self.head_dim ** -0.5

    @property
    def use_head_token(self) -> bool:
        return self.ht_proj is not None


@dataclass
class AttentionTrace:
    """Optional sink for the softmax maps of a forward pass, one (B, h, T, T) array per call."""

    maps: List[np.ndarray] = field(default_factory=list)


def _check_heads(dim: int, num_heads: int) -> None:
    if num_heads < 1 or dim % num_heads:
        raise ConfigError(f"embed dim {dim} not divisible by {num_heads} heads")


def hi_mhsa_init(store: ParamStore, prefix: str, dim: int, num_heads: int, init: Initializer,
                 use_head_token: bool = True, attn_dropout: float = 0.0) -> HiMhsaParams:
    _check_heads(dim, num_heads)
    d = dim // num_heads
    LinearParams.create(store, f"{prefix}.qkv", dim, 3 * dim, init)
    LinearParams.create(store, f"{prefix}.proj", dim, dim, init)
    if use_head_token:
        LinearParams.create(store, f"{prefix}.ht_proj", d, dim, init)
        LayerNormParams.create(store, f"{prefix}.ht_norm", d, init)
        store.add(f"{prefix}.head_embed", init.zeros((num_heads, dim)))
    return hi_mhsa_bind(store, prefix, num_heads, use_head_token, attn_dropout)


def hi_mhsa_bind(store: ParamStore, prefix: str, num_heads: int, use_head_token: bool = True,
                 attn_dropout: float = 0.0) -> HiMhsaParams:
    p = HiMhsaParams(LinearParams.bind(store, f"{prefix}.qkv"), LinearParams.bind(store, f"{prefix}.proj"),
                     num_heads, attn_dropout=attn_dropout)
    if use_head_token:
        p.ht_proj = LinearParams.bind(store, f"{prefix}.ht_proj")
        p.ht_norm = LayerNormParams.bind(store, f"{prefix}.ht_norm")
        p.head_embed = store[f"{prefix}.head_embed"]
    return p


def make_head_tokens(p: HiMhsaParams, x: Tensor) -> Tensor:
    """(B, T, D) tokens -> (B, h, D) head tokens."""
    b, t, dim = x.shape
    h, d = p.num_heads, dim // p.num_heads
    _check_heads(dim, h)
    if p.ht_proj is None:
        raise ConfigError("head tokens are disabled for this attention layer")
    groups = x.reshape(b, t, h, d).mean(axis=1)            # (B, h, d)
    ht = p.ht_proj(groups).reshape(b, h, h, d)               # (B, h, D) viewed per head slice
    ht = gelu(p.ht_norm(ht)).reshape(b, h, dim)
    return ht + p.head_embed.reshape(1, h, dim)


def attention(p: HiMhsaParams, x: Tensor, train: bool = False, rng: Optional[np.random.Generator] = None,
              trace: Optional[AttentionTrace] = None) -> Tensor:
    """Plain multi-head scaled dot-product attention with output projection."""
    b, t, dim = x.shape
    h, d = p.num_heads, p.head_dim
    qkv = p.qkv(x).reshape(b, t, 3, h, d).transpose(2, 0, 3, 1, 4)   # (3, B, h, T, d)
    q, k, v = qkv[0], qkv[1], qkv[2]
    attn = softmax((q @ k.transpose(0, 1, 3, 2)) * p.scale)
    if trace is not None:
        trace.maps.append(attn.data.copy())
    attn = dropout(attn, p.attn_dropout, rng, train)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, dim)
    return p.proj(out)


def hi_mhsa_forward(p: HiMhsaParams, x: Tensor, train: bool = False, rng: Optional[np.random.Generator] = None,
                    trace: Optional[AttentionTrace] = None) -> Tensor:
    """Attention over [class; patches; head tokens], returning the N+1 input positions."""
    if not p.use_head_token:
        return attention(p, x, train, rng, trace)
    t0 = x.shape[1]
    ext = concat([x, make_head_tokens(p, x)], axis=1)
    y = attention(p, ext, train, rng, trace)
    cls_tok = y[:, 0:1] + y[:, t0:].mean(axis=1, keepdims=True)
    return concat([cls_tok, y[:, 1:t0]], axis=1)
