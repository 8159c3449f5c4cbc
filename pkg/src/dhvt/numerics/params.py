"""Named parameter storage and the small parameter bundles layers are built from."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from .functional import BatchNormState, batchnorm2d, conv2d, layernorm, linear
from .tensor import ConfigError, Tensor, resolve_dtype

BUFFER_SUFFIXES = ("running_mean", "running_var")


def is_buffer_name(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in BUFFER_SUFFIXES


class ParamStore(OrderedDict):
    """Ordered ``name -> Tensor`` map holding every tensor of one model.

    Trainable tensors have ``requires_grad=True``; batch-norm running
    statistics are stored alongside as non-trainable buffers so that a
    checkpoint captures the full model state.
    """

    def __setitem__(self, name, value):
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        if not isinstance(value, Tensor):
            raise TypeError(f"{name}: expected Tensor, got {type(value).__name__}")
        if value.name is None:
            value.name = name
        super().__setitem__(name, value)

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        t = Tensor(data, requires_grad=trainable, name=name)
        self[name] = t
        return t

    def trainable(self) -> Iterator[Tuple[str, Tensor]]:
        return ((k, v) for k, v in self.items() if v.requires_grad)

    def buffers(self) -> Iterator[Tuple[str, Tensor]]:
        return ((k, v) for k, v in self.items() if not v.requires_grad)

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def num_params(self) -> int:
        return sum(t.size for _, t in self.trainable())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self.items():
            out[k] = Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
        return out


class Initializer:
    """Seeded source of initial parameter values (trunc-normal std 0.02 by default)."""

    def __init__(self, seed: int, dtype="f32", std: float = 0.02):
        self.rng = np.random.default_rng(seed)
        self.dtype = resolve_dtype(dtype)
        self.std = std

    def trunc_normal(self, shape) -> np.ndarray:
        # resample anything beyond two standard deviations
        x = self.rng.standard_normal(shape)
        bad = np.abs(x) > 2.0
        while bad.any():
            x[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(x) > 2.0
        return (x * self.std).astype(self.dtype)

    def zeros(self, shape) -> np.ndarray:
        return np.zeros(shape, dtype=self.dtype)

    def ones(self, shape) -> np.ndarray:
        return np.ones(shape, dtype=self.dtype)


class ShapeOnlyInitializer(Initializer):
    """Allocates without drawing random numbers; for structure and size queries."""

    def trunc_normal(self, shape) -> np.ndarray:
        return np.zeros(shape, dtype=self.dtype)


@dataclass
class LinearParams:
    weight: Tensor
    bias: Optional[Tensor]

    @classmethod
    def create(cls, store: ParamStore, prefix: str, din: int, dout: int, init: Initializer, bias: bool = True):
        store.add(f"{prefix}.weight", init.trunc_normal((dout, din)))
        if bias:
            store.add(f"{prefix}.bias", init.zeros((dout,)))
        return cls.bind(store, prefix)

    @classmethod
    def bind(cls, store: ParamStore, prefix: str) -> "LinearParams":
        return cls(store[f"{prefix}.weight"], store.get(f"{prefix}.bias"))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


@dataclass
class ConvParams:
    weight: Tensor
    bias: Optional[Tensor]
    stride: int = 1
    padding: int = 0
    groups: int = 1

    @classmethod
    def create(cls, store, prefix, cin, cout, k, init: Initializer, stride=1, padding=0, groups=1, bias=True):
        if cin % groups or cout % groups:
            raise ConfigError(f"{prefix}: channels {cin}->{cout} not divisible by groups={groups}")
        store.add(f"{prefix}.weight", init.trunc_normal((cout, cin // groups, k, k)))
        if bias:
            store.add(f"{prefix}.bias", init.zeros((cout,)))
        return cls.bind(store, prefix, stride, padding, groups)

    @classmethod
    def bind(cls, store, prefix, stride=1, padding=0, groups=1) -> "ConvParams":
        return cls(store[f"{prefix}.weight"], store.get(f"{prefix}.bias"), stride, padding, groups)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-6

    @classmethod
    def create(cls, store, prefix, dim, init: Initializer, eps=1e-6):
        store.add(f"{prefix}.weight", init.ones((dim,)))
        store.add(f"{prefix}.bias", init.zeros((dim,)))
        return cls.bind(store, prefix, eps)

    @classmethod
    def bind(cls, store, prefix, eps=1e-6) -> "LayerNormParams":
        return cls(store[f"{prefix}.weight"], store[f"{prefix}.bias"], eps)

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gamma, self.beta, self.eps)


def create_batchnorm(store, prefix, channels, init: Initializer, eps=1e-5, momentum=0.1) -> BatchNormState:
    store.add(f"{prefix}.weight", init.ones((channels,)))
    store.add(f"{prefix}.bias", init.zeros((channels,)))
    store.add(f"{prefix}.running_mean", init.zeros((channels,)), trainable=False)
    store.add(f"{prefix}.running_var", init.ones((channels,)), trainable=False)
    return bind_batchnorm(store, prefix, eps, momentum)


def bind_batchnorm(store, prefix, eps=1e-5, momentum=0.1) -> BatchNormState:
    return BatchNormState(store[f"{prefix}.weight"], store[f"{prefix}.bias"],
                          store[f"{prefix}.running_mean"], store[f"{prefix}.running_var"], eps, momentum)


NORM_KINDS = ("bn", "ln")


@dataclass
class ChannelNorm:
    """Normalization of a (B, C, H, W) map: batch norm, or layer norm over C per location."""

    kind: str
    bn: Optional[BatchNormState] = None
    ln: Optional[LayerNormParams] = None

    @classmethod
    def create(cls, store, prefix, channels, kind, init: Initializer):
        if kind == "bn":
            create_batchnorm(store, prefix, channels, init)
        elif kind == "ln":
            LayerNormParams.create(store, prefix, channels, init, eps=1e-6)
        else:
            raise ConfigError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")
        return cls.bind(store, prefix, kind)

    @classmethod
    def bind(cls, store, prefix, kind) -> "ChannelNorm":
        if kind == "bn":
            return cls(kind, bn=bind_batchnorm(store, prefix))
        return cls(kind, ln=LayerNormParams.bind(store, prefix, 1e-6))

    def __call__(self, x: Tensor, train: bool, update_stats: bool = True) -> Tensor:
        if self.kind == "bn":
            return batchnorm2d(x, self.bn, train, update_stats)
        y = self.ln(x.transpose(0, 2, 3, 1))
        return y.transpose(0, 3, 1, 2)
