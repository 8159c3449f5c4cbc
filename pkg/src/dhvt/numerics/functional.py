"""Fused layer primitives with hand-written vector-Jacobian products."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import erf

from . import kernels
from .tensor import ConfigError, ShapeError, Tensor, record

SQRT1_2 = 1.0 / math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DegenerateBatchError(ValueError):
    """Batch statistics requested over fewer than two values."""


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear expects last extent {weight.shape[1]}, got input {x.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd if x.requires_grad else None
        gw = g2.T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record("linear", out, parents, vjp)


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-d cross-correlation with zero padding.

    Args:
        x: input of shape (B, Cin, H, W).
        weight: kernel of shape (Cout, Cin // groups, kh, kw).
        bias: optional (Cout,) vector.
        stride: step in both spatial directions.
        padding: zeros added on every side.
        groups: channel groups; ``groups == Cin == Cout`` takes the depth-wise kernel.

    Returns:
        Tensor of shape (B, Cout, H', W') with H' = (H + 2p - kh) // stride + 1.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (B, C, H, W), got {x.shape}")
    b, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"channels ({cin} in, {cout} out) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(f"kernel {weight.shape} incompatible with {cin} input channels and groups={groups}")
    ho, wo = _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xp = np.ascontiguousarray(xp)
    hp, wp = xp.shape[2:]
    wd = np.ascontiguousarray(weight.data)
    depthwise = groups == cin == cout

    if depthwise:
        out = kernels.dwconv_forward(xp, wd, stride, ho, wo)
        cols = None
    else:
        cols = kernels.im2col(xp, kh, kw, stride, ho, wo)  # (B, Cin*kh*kw, L)
        k = cin_g * kh * kw
        cg = cout // groups
        if groups == 1:
            out = np.matmul(wd.reshape(cout, k), cols)
        else:
            out = np.concatenate(
                [np.matmul(wd[gi * cg:(gi + 1) * cg].reshape(cg, k), cols[:, gi * k:(gi + 1) * k])
                 for gi in range(groups)], axis=1)
        out = out.reshape(b, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def unpad(gxp):
        return gxp[:, :, padding:hp - padding, padding:wp - padding] if padding else gxp

    def vjp(g):
        g = np.ascontiguousarray(g)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if depthwise:
            gxp, gw = kernels.dwconv_backward(g, xp, wd, stride)
        else:
            k = cin_g * kh * kw
            cg = cout // groups
            g2 = g.reshape(b, cout, ho * wo)
            gw = np.empty_like(wd)
            gcols = np.empty_like(cols)
            for gi in range(groups):
                go = g2[:, gi * cg:(gi + 1) * cg]
                cl = cols[:, gi * k:(gi + 1) * k]
                wg = wd[gi * cg:(gi + 1) * cg].reshape(cg, k)
                gw[gi * cg:(gi + 1) * cg] = np.einsum("bol,bkl->ok", go, cl).reshape(cg, cin_g, kh, kw)
                gcols[:, gi * k:(gi + 1) * k] = np.matmul(wg.T, go)
            gxp = kernels.col2im(gcols, cin, hp, wp, kh, kw, stride, ho, wo) if x.requires_grad else None
        gx = unpad(gxp) if gxp is not None and x.requires_grad else None
        grads = (gx, gw if weight.requires_grad else None)
        return grads if bias is None else grads + (gb,)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", out, parents, vjp)


@dataclass
class BatchNormState:
    """Affine parameters and running statistics of one 2-d batch norm."""

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = 1e-5
    momentum: float = 0.1

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm2d(x: Tensor, st: BatchNormState, train: bool, update_stats: bool = True) -> Tensor:
    """Per-channel normalization over (B, H, W).

    In train mode batch statistics are used and the running buffers move by
    ``momentum`` (unbiased variance, as torch does); eval mode is affine.
    """
    if x.ndim != 4 or x.shape[1] != st.channels:
        raise ShapeError(f"batchnorm2d over {st.channels} channels got input {x.shape}")
    xd = x.data
    gamma = st.gamma.data[None, :, None, None]
    beta = st.beta.data[None, :, None, None]
    if not train:
        inv = 1.0 / np.sqrt(st.running_var.data + st.eps)
        scale = gamma * inv[None, :, None, None]
        xhat = (xd - st.running_mean.data[None, :, None, None]) * inv[None, :, None, None]
        out = xhat * gamma + beta

        def vjp_eval(g):
            return (g * scale, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return record("batchnorm2d", out, (x, st.gamma, st.beta), vjp_eval)

    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if m < 2:
        raise DegenerateBatchError(f"batch norm in train mode needs B*H*W >= 2, got {m}")
    mu = xd.mean(axis=(0, 2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + st.eps)
    xhat = xc * inv
    out = xhat * gamma + beta
    if update_stats:
        mom = st.momentum
        st.running_mean.data = ((1 - mom) * st.running_mean.data + mom * mu.reshape(-1)).astype(xd.dtype)
        st.running_var.data = ((1 - mom) * st.running_var.data
                               + mom * var.reshape(-1) * (m / (m - 1))).astype(xd.dtype)

    def vjp(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma
        gx = inv * (gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
        return gx, gg, gbeta

    return record("batchnorm2d", out, (x, st.gamma, st.beta), vjp)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm over {d} features got gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layernorm", out, (x, gamma, beta), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * SQRT1_2))
    out = xd * cdf

    def vjp(g):
        return (g * (cdf + xd * INV_SQRT_2PI * np.exp(-0.5 * xd * xd)),)

    return record("gelu", out.astype(xd.dtype, copy=False), (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return record("softmax", p, (x,), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    ld = logits.data
    if ld.ndim != 2 or labels.shape != (ld.shape[0],):
        raise ShapeError(f"cross_entropy expects (B, K) logits and (B,) labels, got {ld.shape}, {labels.shape}")
    z = ld - ld.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(ld.shape[0])
    loss = -logp[rows, labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / ld.shape[0]),)

    return record("cross_entropy", np.asarray(loss, dtype=ld.dtype), (logits,), vjp)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def avg_pool3x3(x: Tensor) -> Tensor:
    """3x3 stride-1 average pool with zero padding counted in the divisor."""
    c = x.shape[1]
    k = Tensor(np.full((c, 1, 3, 3), 1.0 / 9.0, dtype=x.dtype))
    return conv2d(x, k, None, stride=1, padding=1, groups=c)
