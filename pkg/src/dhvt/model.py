"""DHVT assembly: patch embedding, class token, pre-norm encoder blocks, head.

A model instance is just a :class:`ParamStore`; the structure is re-derived
from the :class:`ModelConfig` by name lookups whenever it is needed.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .daff import DaffParams, daff_bind, daff_forward, daff_init, grid_to_tokens, squeeze_excite, tokens_to_grid
from .hi_mhsa import AttentionTrace, HiMhsaParams, hi_mhsa_bind, hi_mhsa_forward, hi_mhsa_init
from .numerics import (
    ConfigError,
    ConvParams,
    Initializer,
    LayerNormParams,
    LinearParams,
    ParamStore,
    ShapeError,
    ShapeOnlyInitializer,
    Tensor,
    avg_pool3x3,
    concat,
    gelu,
)
from .sope import SUPPORTED_PATCH_SIZES, SopeParams, sope_bind, sope_forward, sope_init

NORM_POLICIES = ("BN-BN", "BN-LN", "LN-BN", "LN-LN")
PLAIN_FFN_KINDS = ("mlp", "split_cls", "split_cls_agg", "split_cls_avgpool")


@dataclass
class ModelConfig:
    image_size: Tuple[int, int] = (32, 32)
    patch_size: int = 4
    embed_dim: int = 192
    depth: int = 12
    num_heads: int = 4
    mlp_ratio: float = 4
    se_ratio: int = 4
    num_classes: int = 100
    in_chans: int = 3
    use_sope: bool = True
    use_abs_pos_embed: bool = False
    use_daff: bool = True
    use_head_token: bool = True
    agg_on_all_tokens: bool = False
    disable_dw_shortcut: bool = False
    attn_dropout: float = 0.0
    norm_policy: str = "BN-BN"
    plain_ffn: str = "mlp"

    def __post_init__(self):
        if isinstance(self.image_size, int):
            self.image_size = (self.image_size, self.image_size)
        self.image_size = tuple(int(v) for v in self.image_size)

    # -- derived ---------------------------------------------------------
    @property
    def grid(self) -> Tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return int(self.mlp_ratio * self.embed_dim)

    @property
    def sope_norm(self) -> str:
        return self.norm_policy.split("-")[0].lower()

    @property
    def daff_norm(self) -> str:
        return self.norm_policy.split("-")[1].lower()

    @property
    def ffn_kind(self) -> str:
        return "daff" if self.use_daff else self.plain_ffn

    def validate(self) -> "ModelConfig":
        H, W = self.image_size
        D, h, P = self.embed_dim, self.num_heads, self.patch_size
        if min(H, W, D, h, P, self.depth, self.num_classes, self.in_chans) < 1:
            raise ConfigError(f"all extents must be positive: {self}")
        if D % h:
            raise ConfigError(f"embed_dim % num_heads == 0 violated: {D} % {h} = {D % h}")
        if H % P or W % P:
            raise ConfigError(f"image_size % patch_size == 0 violated: {H}x{W} with patch {P}")
        if self.mlp_ratio * D != int(self.mlp_ratio * D):
            raise ConfigError(f"mlp_ratio * embed_dim must be integral: {self.mlp_ratio} * {D}")
        if self.use_sope and P not in SUPPORTED_PATCH_SIZES:
            raise ConfigError(f"SOPE supports patch sizes {SUPPORTED_PATCH_SIZES}, got {P}")
        if self.norm_policy not in NORM_POLICIES:
            raise ConfigError(f"norm_policy must be one of {NORM_POLICIES}, got {self.norm_policy!r}")
        if self.plain_ffn not in PLAIN_FFN_KINDS:
            raise ConfigError(f"plain_ffn must be one of {PLAIN_FFN_KINDS}, got {self.plain_ffn!r}")
        if self.ffn_kind in ("daff", "split_cls_agg") and D % self.se_ratio:
            raise ConfigError(f"embed_dim % se_ratio == 0 violated: {D} % {self.se_ratio}")
        if self.ffn_kind in ("daff", "split_cls_avgpool") and self.grid[0] != self.grid[1]:
            raise ConfigError(f"convolutional FFN needs a square patch grid, got {self.grid}")
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ConfigError(f"attn_dropout must lie in [0, 1), got {self.attn_dropout}")
        return self

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------------------
# variants
# ---------------------------------------------------------------------------

_VARIANTS: Dict[Tuple[str, str, int], dict] = {
    ("DHVT-T", "CIFAR", 4): dict(embed_dim=192, num_heads=4),
    ("DHVT-T", "CIFAR", 2): dict(embed_dim=192, num_heads=4),
    ("DHVT-S", "CIFAR", 4): dict(embed_dim=384, num_heads=8),
    ("DHVT-S", "CIFAR", 2): dict(embed_dim=384, num_heads=8),
    ("DHVT-T", "Domain", 16): dict(embed_dim=192, num_heads=4),
    ("DHVT-S", "Domain", 16): dict(embed_dim=384, num_heads=6),
    ("DHVT-T", "ImageNet", 16): dict(embed_dim=192, num_heads=3),
    ("DHVT-S", "ImageNet", 16): dict(embed_dim=384, num_heads=6),
}
_DATASETS = {"CIFAR": (32, 100), "Domain": (224, 345), "ImageNet": (224, 1000)}

# reference totals per variant: (#params in millions, GFLOPs)
TABLE_12 = {
    ("DHVT-T", "CIFAR", 4): (6.0, 0.4),
    ("DHVT-T", "CIFAR", 2): (5.8, 1.4),
    ("DHVT-S", "CIFAR", 4): (23.4, 1.5),
    ("DHVT-S", "CIFAR", 2): (22.8, 5.6),
    ("DHVT-T", "Domain", 16): (6.1, 1.2),
    ("DHVT-S", "Domain", 16): (23.8, 4.7),
    ("DHVT-T", "ImageNet", 16): (6.2, 1.2),
    ("DHVT-S", "ImageNet", 16): (24.1, 4.7),
}


def variant_names() -> List[str]:
    return [f"{n}/{ds}/P{p}" for n, ds, p in _VARIANTS]


def _normalize_variant(name: str, dataset: Optional[str], patch: Optional[int]) -> Tuple[str, str, int]:
    if dataset is None and patch is None and "/" in name:
        parts = name.split("/")
        if len(parts) != 3:
            raise ConfigError(f"variant string must look like 'DHVT-T/CIFAR/P4', got {name!r}")
        name, dataset, p = parts
        patch = int(p.upper().lstrip("P"))
    name = name.upper().replace("DHVT-", "")
    name = f"DHVT-{name}"
    ds_map = {k.lower(): k for k in _DATASETS}
    ds_map.update({"cifar100": "CIFAR", "cifar-100": "CIFAR", "domainnet": "Domain", "imagenet-1k": "ImageNet"})
    dataset = ds_map.get(str(dataset).lower(), dataset)
    return name, dataset, int(patch) if patch is not None else -1


def variant_factory(name: str, dataset: Optional[str] = None, patch: Optional[int] = None) -> ModelConfig:
    """Configuration for one row of the DHVT variant table.

    Accepts either ``("DHVT-T", "CIFAR", 4)`` or a single ``"DHVT-T/CIFAR/P4"`` string.
    """
    key = _normalize_variant(name, dataset, patch)
    if key not in _VARIANTS:
        raise ConfigError(f"unknown variant {key}; options: {', '.join(variant_names())}")
    size, classes = _DATASETS[key[1]]
    return ModelConfig(image_size=(size, size), patch_size=key[2], depth=12, mlp_ratio=4, se_ratio=4,
                       num_classes=classes, **_VARIANTS[key]).validate()


def micro_config(**overrides) -> ModelConfig:
    """The small full-DHVT configuration used for gradient checks."""
    base = dict(image_size=(8, 8), patch_size=4, embed_dim=16, depth=1, num_heads=2, num_classes=3)
    base.update(overrides)
    return ModelConfig(**base).validate()


def table5_configs(base: ModelConfig) -> Dict[str, ModelConfig]:
    """All (abs PE, SOPE, DAFF) combinations; head tokens off as in the baseline."""
    out = {}
    for pe in (True, False):
        for sope in (False, True):
            for daff in (False, True):
                key = f"pe={int(pe)},sope={int(sope)},daff={int(daff)}"
                out[key] = base.replace(use_abs_pos_embed=pe, use_sope=sope, use_daff=daff,
                                        use_head_token=False, plain_ffn="mlp")
    return out


def table6_configs(base: ModelConfig) -> Dict[str, ModelConfig]:
    """Head-token ablation rows: baseline, baseline + head tokens, full model."""
    return {
        "baseline": base.replace(use_abs_pos_embed=True, use_sope=False, use_daff=False, use_head_token=False),
        "baseline+ht": base.replace(use_abs_pos_embed=True, use_sope=False, use_daff=False, use_head_token=True),
        "full": base.replace(use_abs_pos_embed=False, use_sope=True, use_daff=True, use_head_token=True),
    }


def baseline_of(cfg: ModelConfig) -> ModelConfig:
    """DeiT-style baseline with the same dimensions: every DHVT module switched off, abs PE on."""
    return cfg.replace(use_abs_pos_embed=True, use_sope=False, use_daff=False, use_head_token=False,
                       plain_ffn="mlp")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class PlainFfnParams:
    kind: str
    fc1: LinearParams
    fc2: LinearParams
    compress: Optional[LinearParams] = None
    excitation: Optional[LinearParams] = None


@dataclass
class BlockParams:
    norm1: LayerNormParams
    attn: HiMhsaParams
    norm2: LayerNormParams
    ffn: Union[DaffParams, PlainFfnParams]


@dataclass
class DHVT:
    """Bound view of a ParamStore under a given config."""

    cfg: ModelConfig
    sope: Optional[SopeParams]
    patch_embed: Optional[ConvParams]
    cls_token: Tensor
    pos_embed: Optional[Tensor]
    blocks: List[BlockParams]
    norm: LayerNormParams
    head: LinearParams


def build_model(cfg: ModelConfig, seed: int = 0, dtype="f32", materialize: bool = True) -> ParamStore:
    """Create and initialise every tensor of the model described by `cfg`.

    With ``materialize=False`` random tensors are left at zero, which is enough
    for counting and for checking a tensor table against a config.
    """
    cfg.validate()
    init = Initializer(seed, dtype) if materialize else ShapeOnlyInitializer(seed, dtype)
    ps = ParamStore()
    D, P = cfg.embed_dim, cfg.patch_size
    if cfg.use_sope:
        sope_init(ps, "sope", P, D, init, cfg.in_chans, cfg.sope_norm)
    else:
        ConvParams.create(ps, "patch_embed.proj", cfg.in_chans, D, P, init, stride=P)
    ps.add("cls_token", init.trunc_normal((1, 1, D)))
    if cfg.use_abs_pos_embed:
        ps.add("pos_embed", init.trunc_normal((1, cfg.num_patches + 1, D)))
    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        LayerNormParams.create(ps, f"{pre}.norm1", D, init)
        hi_mhsa_init(ps, f"{pre}.attn", D, cfg.num_heads, init, cfg.use_head_token, cfg.attn_dropout)
        LayerNormParams.create(ps, f"{pre}.norm2", D, init)
        if cfg.use_daff:
            daff_init(ps, f"{pre}.mlp", D, init, cfg.mlp_ratio, cfg.se_ratio, cfg.daff_norm,
                      cfg.agg_on_all_tokens, cfg.disable_dw_shortcut)
        else:
            LinearParams.create(ps, f"{pre}.mlp.fc1", D, cfg.hidden_dim, init)
            LinearParams.create(ps, f"{pre}.mlp.fc2", cfg.hidden_dim, D, init)
            if cfg.plain_ffn == "split_cls_agg":
                LinearParams.create(ps, f"{pre}.mlp.compress", D, D // cfg.se_ratio, init)
                LinearParams.create(ps, f"{pre}.mlp.excitation", D // cfg.se_ratio, D, init)
    LayerNormParams.create(ps, "norm", D, init)
    LinearParams.create(ps, "head", D, cfg.num_classes, init)
    return ps


def bind_model(ps: ParamStore, cfg: ModelConfig) -> DHVT:
    D, P = cfg.embed_dim, cfg.patch_size
    sope = sope_bind(ps, "sope", P, D, cfg.in_chans, cfg.sope_norm) if cfg.use_sope else None
    patch_embed = None if cfg.use_sope else ConvParams.bind(ps, "patch_embed.proj", stride=P)
    blocks = []
    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        if cfg.use_daff:
            ffn = daff_bind(ps, f"{pre}.mlp", cfg.daff_norm, cfg.agg_on_all_tokens, cfg.disable_dw_shortcut)
        else:
            agg = cfg.plain_ffn == "split_cls_agg"
            ffn = PlainFfnParams(cfg.plain_ffn, LinearParams.bind(ps, f"{pre}.mlp.fc1"),
                                 LinearParams.bind(ps, f"{pre}.mlp.fc2"),
                                 LinearParams.bind(ps, f"{pre}.mlp.compress") if agg else None,
                                 LinearParams.bind(ps, f"{pre}.mlp.excitation") if agg else None)
        blocks.append(BlockParams(
            LayerNormParams.bind(ps, f"{pre}.norm1"),
            hi_mhsa_bind(ps, f"{pre}.attn", cfg.num_heads, cfg.use_head_token, cfg.attn_dropout),
            LayerNormParams.bind(ps, f"{pre}.norm2"),
            ffn,
        ))
    return DHVT(cfg, sope, patch_embed, ps["cls_token"], ps.get("pos_embed") if cfg.use_abs_pos_embed else None,
                blocks, LayerNormParams.bind(ps, "norm"), LinearParams.bind(ps, "head"))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def plain_ffn_forward(p: PlainFfnParams, x: Tensor) -> Tensor:
    """Two-layer GELU MLP and its split-class-token ablation variants."""
    if p.kind == "mlp":
        return p.fc2(gelu(p.fc1(x)))
    cls_tok, patches = x[:, 0:1], x[:, 1:]
    t = gelu(p.fc1(patches))
    if p.kind == "split_cls_avgpool":
        grid = tokens_to_grid(t)
        t = grid_to_tokens(grid + avg_pool3x3(grid))
    t = p.fc2(t)
    if p.kind == "split_cls_agg":
        pooled = t.mean(axis=1, keepdims=True)
        cls_tok = cls_tok * p.excitation(gelu(p.compress(pooled)))
    return concat([cls_tok, t], axis=1)


def encoder_block_forward(block: BlockParams, x: Tensor, train: bool = False, update_stats: bool = True,
                          rng: Optional[np.random.Generator] = None,
                          trace: Optional[AttentionTrace] = None) -> Tensor:
    """Pre-norm residual block: attention branch, then feed-forward branch."""
    x = x + hi_mhsa_forward(block.attn, block.norm1(x), train, rng, trace)
    h = block.norm2(x)
    if isinstance(block.ffn, DaffParams):
        h = daff_forward(block.ffn, h, train, update_stats)
    else:
        h = plain_ffn_forward(block.ffn, h)
    return x + h


def embed(m: DHVT, images: Tensor, train: bool, update_stats: bool = True) -> Tensor:
    """Images -> class-token-first (B, N+1, D) sequence, position embedding included."""
    cfg = m.cfg
    if images.ndim != 4 or images.shape[1] != cfg.in_chans or tuple(images.shape[2:]) != cfg.image_size:
        raise ShapeError(f"expected images of shape (B, {cfg.in_chans}, {cfg.image_size[0]}, "
                         f"{cfg.image_size[1]}), got {images.shape}")
    if m.sope is not None:
        tokens = sope_forward(m.sope, images, train, update_stats)
    else:
        fmap = m.patch_embed(images)
        tokens = fmap.reshape(fmap.shape[0], fmap.shape[1], -1).transpose(0, 2, 1)
    b, _, d = tokens.shape
    cls_tok = m.cls_token + Tensor(np.zeros((b, 1, d), dtype=tokens.dtype))
    x = concat([cls_tok, tokens], axis=1)
    if m.pos_embed is not None:
        x = x + m.pos_embed
    return x


def model_forward(ps: ParamStore, cfg: ModelConfig, images, train: bool = False, update_stats: bool = True,
                  rng: Optional[np.random.Generator] = None, return_attention: bool = False):
    """Logits (B, num_classes); with `return_attention`, also the per-layer softmax maps."""
    m = bind_model(ps, cfg)
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=m.cls_token.dtype))
    trace = AttentionTrace() if return_attention else None
    x = embed(m, images, train, update_stats)
    for block in m.blocks:
        x = encoder_block_forward(block, x, train, update_stats, rng, trace)
    logits = m.head(m.norm(x[:, 0]))
    if return_attention:
        return logits, trace.maps
    return logits
