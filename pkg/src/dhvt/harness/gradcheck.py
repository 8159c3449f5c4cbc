"""Finite-difference verification of the model's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from ..model import ModelConfig, build_model, model_forward
from ..numerics import ParamStore, Tape, Tensor, backward, cross_entropy

# |a - n| / max(|a|, |n|, REL_FLOOR). One ulp of an O(1) f64 loss over a 2e-6
# central difference is ~1e-10, so structurally-zero gradients (biases feeding
# batch norm, key biases) read as ~1e-10 noise; the floor keeps those at ~1e-5.
REL_FLOOR = 1e-5


@dataclass
class GradSample:
    name: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric), REL_FLOOR)
        return abs(self.analytic - self.numeric) / denom


@dataclass
class GradcheckReport:
    tolerance: float
    samples: List[GradSample] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((s.rel_error for s in self.samples), default=0.0)

    @property
    def worst(self) -> Optional[GradSample]:
        return max(self.samples, key=lambda s: s.rel_error, default=None)

    @property
    def offenders(self) -> List[GradSample]:
        return [s for s in self.samples if s.rel_error > self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.offenders

    def summary(self) -> str:
        w = self.worst
        status = "PASS" if self.passed else "FAIL"
        head = (f"{status}: {len(self.samples)} samples, max rel error {self.max_rel_error:.3e} "
                f"(tolerance {self.tolerance:.1e})")
        if w is not None:
            head += f", worst {w.name}{list(w.index)}"
        lines = [head]
        for s in sorted(self.offenders, key=lambda s: -s.rel_error)[:20]:
            lines.append(f"  {s.name}{list(s.index)}: analytic {s.analytic:.6e} numeric {s.numeric:.6e} "
                         f"rel {s.rel_error:.3e}")
        return "\n".join(lines)


def sample_indices(ps: ParamStore, n: int, rng: np.random.Generator) -> List[Tuple[str, Tuple[int, ...]]]:
    """At least one entry per trainable tensor, the rest uniform over all scalars."""
    names = [k for k, _ in ps.trainable()]
    sizes = np.array([ps[k].size for k in names])
    picks = [(k, int(rng.integers(ps[k].size))) for k in names]
    extra = max(n - len(picks), 0)
    flat = rng.choice(int(sizes.sum()), size=extra, replace=extra > sizes.sum())
    bounds = np.cumsum(sizes)
    for f in flat:
        t = int(np.searchsorted(bounds, f, side="right"))
        start = bounds[t - 1] if t else 0
        picks.append((names[t], int(f - start)))
    return [(k, tuple(int(i) for i in np.unravel_index(j, ps[k].shape))) for k, j in picks]


def gradcheck(cfg: ModelConfig, tolerance: float = 1e-4, n_samples: int = 200, seed: int = 0,
              batch: int = 2, step: float = 1e-6, corrupt: Optional[str] = None,
              ps: Optional[ParamStore] = None) -> GradcheckReport:
    """Compare backprop against central differences on sampled parameters.

    Runs in float64, train mode (batch statistics) with running-stat updates
    disabled so repeated forwards see identical state. `corrupt` names a
    tensor whose analytic gradient is negated, for fault-injection tests.
    """
    rng = np.random.default_rng(seed)
    if ps is None:
        ps = build_model(cfg, seed=seed, dtype="f64")
        # perturb the zero/one initial values so that no gradient vanishes by symmetry
        for name, t in ps.trainable():
            t.data = t.data + 0.1 * rng.standard_normal(t.shape)
    H, W = cfg.image_size
    images = Tensor(rng.standard_normal((batch, cfg.in_chans, H, W)))
    labels = rng.integers(0, cfg.num_classes, size=batch)

    def loss_value() -> float:
        logits = model_forward(ps, cfg, images, train=True, update_stats=False)
        return float(cross_entropy(logits, labels).data)

    ps.zero_grad()
    with Tape() as tape:
        loss = cross_entropy(model_forward(ps, cfg, images, train=True, update_stats=False), labels)
    backward(loss, tape)
    if corrupt is not None:
        if corrupt not in ps:
            raise KeyError(f"cannot corrupt unknown tensor {corrupt!r}")
        ps[corrupt].grad = -ps[corrupt].grad

    report = GradcheckReport(tolerance)
    for name, idx in sample_indices(ps, n_samples, rng):
        t = ps[name]
        analytic = float(t.grad[idx]) if t.grad is not None else 0.0
        orig = t.data[idx]
        t.data[idx] = orig + step
        up = loss_value()
        t.data[idx] = orig - step
        down = loss_value()
        t.data[idx] = orig
        report.samples.append(GradSample(name, idx, analytic, (up - down) / (2 * step)))
    return report
