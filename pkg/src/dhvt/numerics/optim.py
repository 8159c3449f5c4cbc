"""AdamW with decoupled weight decay, and the warm-up + cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Dict, Optional

import numpy as np

from .params import ParamStore


class AdamW:
    """Adam with bias-corrected moments and weight decay applied to the weights directly.

    Moment buffers are allocated lazily the first time a parameter is stepped.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.05):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: ParamStore, grads: Optional[Dict[str, np.ndarray]] = None,
             lr: Optional[float] = None) -> None:
        adamw_step(params, grads, self.lr if lr is None else lr, self.beta1, self.beta2,
                   self.eps, self.weight_decay, state=self)


def adamw_step(params: ParamStore, grads=None, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
               weight_decay=0.0, state: Optional[AdamW] = None) -> None:
    """One AdamW update in place.

    `grads` maps names to arrays; when omitted each tensor's ``.grad`` is used
    and tensors without a gradient are treated as having a zero gradient.
    `state` carries moments and the step counter across calls; a throwaway
    state is used if none is given (a single first step).
    """
    if state is None:
        state = AdamW(lr, beta1, beta2, eps, weight_decay)
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.trainable():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        data = p.data
        if weight_decay:
            data = data - lr * weight_decay * data
        p.data = (data - lr * update).astype(p.dtype, copy=False)


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warm-up from 0 to `base_lr`, then half-cosine decay to 0 at `total_steps`."""
    if total_steps <= 0:
        return 0.0
    step = min(max(step, 0), total_steps)
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return 0.0
    progress = (step - warmup_steps) / span
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))
