"""Sequential overlapping patch embedding.

A learnable per-channel affine on the image, a stack of stride-2 3x3
conv + norm stages (GELU between them), a second affine on the final map,
then flattening of the map into row-major patch tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

from .numerics import ChannelNorm, ConfigError, ConvParams, Initializer, ParamStore, ShapeError, Tensor, gelu

SUPPORTED_PATCH_SIZES = (2, 4, 16)


@dataclass
class AffineParams:
    alpha: Tensor
    beta: Tensor

    @classmethod
    def create(cls, store: ParamStore, prefix: str, channels: int, init: Initializer) -> "AffineParams":
        store.add(f"{prefix}.alpha", init.ones((channels,)))
        store.add(f"{prefix}.beta", init.zeros((channels,)))
        return cls.bind(store, prefix)

    @classmethod
    def bind(cls, store: ParamStore, prefix: str) -> "AffineParams":
        return cls(store[f"{prefix}.alpha"], store[f"{prefix}.beta"])

    @property
    def channels(self) -> int:
        return self.alpha.shape[0]


def affine(x: Tensor, p: AffineParams) -> Tensor:
    """Per-channel ``alpha * x + beta`` on a (B, C, H, W) map."""
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ConfigError(f"affine over {p.channels} channels applied to input of shape {x.shape}")
    c = p.channels
    return x * p.alpha.reshape(1, c, 1, 1) + p.beta.reshape(1, c, 1, 1)


def stage_widths(patch_size: int, embed_dim: int, in_chans: int = 3) -> List[int]:
    """Channel progression through the conv stages, input channels first."""
    if patch_size == 16:
        if embed_dim % 8:
            raise ConfigError(f"patch size 16 needs embed_dim divisible by 8, got {embed_dim}")
        return [in_chans, embed_dim // 8, embed_dim // 4, embed_dim // 2, embed_dim]
    if patch_size == 4:
        if embed_dim % 2:
            raise ConfigError(f"patch size 4 needs an even embed_dim, got {embed_dim}")
        return [in_chans, embed_dim // 2, embed_dim]
    if patch_size == 2:
        return [in_chans, embed_dim]
    raise ConfigError(f"unsupported patch size {patch_size}; supported: {SUPPORTED_PATCH_SIZES}")


@dataclass
class SopeParams:
    pre_affine: AffineParams
    stages: List[Tuple[ConvParams, ChannelNorm]]
    post_affine: AffineParams
    patch_size: int

    @property
    def k(self) -> int:
        return len(self.stages)

    @property
    def gelu_after(self) -> List[bool]:
        # GELU sits between stages; the P=2 stack also ends with one
        n = len(self.stages)
        return [i < n - 1 or self.patch_size == 2 for i in range(n)]


def sope_init(store: ParamStore, prefix: str, patch_size: int, embed_dim: int, init: Initializer,
              image_channels: int = 3, norm: str = "bn") -> SopeParams:
    widths = stage_widths(patch_size, embed_dim, image_channels)
    AffineParams.create(store, f"{prefix}.pre_affine", image_channels, init)
    for i, (cin, cout) in enumerate(zip(widths, widths[1:])):
        ConvParams.create(store, f"{prefix}.stages.{i}.conv", cin, cout, 3, init, stride=2, padding=1)
        ChannelNorm.create(store, f"{prefix}.stages.{i}.norm", cout, norm, init)
    AffineParams.create(store, f"{prefix}.post_affine", embed_dim, init)
    return sope_bind(store, prefix, patch_size, embed_dim, image_channels, norm)


def sope_bind(store: ParamStore, prefix: str, patch_size: int, embed_dim: int,
              image_channels: int = 3, norm: str = "bn") -> SopeParams:
    k = len(stage_widths(patch_size, embed_dim, image_channels)) - 1
    stages = [(ConvParams.bind(store, f"{prefix}.stages.{i}.conv", stride=2, padding=1),
               ChannelNorm.bind(store, f"{prefix}.stages.{i}.norm", norm)) for i in range(k)]
    return SopeParams(AffineParams.bind(store, f"{prefix}.pre_affine"), stages,
                      AffineParams.bind(store, f"{prefix}.post_affine"), patch_size)


def sope_forward(p: SopeParams, images: Tensor, train: bool, update_stats: bool = True) -> Tensor:
    """Embed (B, C, H, W) images into (B, H*W/P^2, D) patch tokens."""
    if images.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W) images, got {images.shape}")
    b, _, h, w = images.shape
    P = p.patch_size
    if h % P or w % P:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {P}")
    x = affine(images, p.pre_affine)
    for (conv, norm), act in zip(p.stages, p.gelu_after):
        x = norm(conv(x), train, update_stats)
        if act:
            x = gelu(x)
    x = affine(x, p.post_affine)
    d = x.shape[1]
    return x.reshape(b, d, -1).transpose(0, 2, 1)
