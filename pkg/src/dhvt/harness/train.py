"""Desk-scale training: AdamW, linear warm-up into cosine decay, cross-entropy."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from ..model import ModelConfig, build_model, model_forward, variant_factory
from ..numerics import AdamW, ParamStore, Tape, Tensor, backward, cross_entropy, lr_at, no_grad, set_debug
from ..numerics.tensor import resolve_dtype
from .checkpoint import save_checkpoint
from .data import CIFAR100_MEAN, CIFAR100_STD, Dataset, gen_synthetic, load_cifar_binary, random_flip_crop

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite."""


def desk_config(**overrides) -> ModelConfig:
    """Small full-DHVT config for 32x32 inputs that trains in seconds on one core."""
    base = dict(image_size=(32, 32), patch_size=4, embed_dim=32, depth=2, num_heads=2, num_classes=4)
    base.update(overrides)
    return ModelConfig(**base).validate()


@dataclass
class RunConfig:
    model: Union[ModelConfig, str, dict] = field(default_factory=desk_config)
    data: dict = field(default_factory=lambda: {"kind": "synthetic", "classes": 4, "samples": 64,
                                                "size": 32, "seed": 7})
    epochs: int = 125
    batch_size: int = 16
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: float = 5
    seed: int = 0
    dtype: str = "f32"
    out_dir: Optional[str] = None
    hflip: bool = False
    crop_pad: int = 0
    stop_at_full_accuracy: bool = False
    max_steps: Optional[int] = None

    def model_config(self) -> ModelConfig:
        m = self.model
        if isinstance(m, ModelConfig):
            return m
        if isinstance(m, str):
            return variant_factory(m)
        return ModelConfig.from_dict(m)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        if isinstance(self.model, ModelConfig):
            d["model"] = self.model.to_dict()
        d["data"] = dict(self.data)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str) -> "RunConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class EpochRecord:
    epoch: int
    step: int
    lr: float
    loss: float
    train_acc: float
    eval_acc: float


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)
    steps_to_full_accuracy: Optional[int] = None
    steps_to_full_eval_accuracy: Optional[int] = None
    best_acc: float = 0.0
    params: Optional[ParamStore] = field(default=None, repr=False)

    def lines(self) -> List[str]:
        return [f"epoch {r.epoch:4d} step {r.step:6d} lr {r.lr:.6e} loss {r.loss:.10f} "
                f"train_acc {r.train_acc:.6f} eval_acc {r.eval_acc:.6f}" for r in self.records]


def load_data(spec: dict, split: str = "train", dtype=np.float32) -> Dataset:
    kind = spec.get("kind", "synthetic")
    if kind == "synthetic":
        return gen_synthetic(spec.get("classes", 4), spec.get("samples", 64), spec.get("size", 32),
                             spec.get("seed", 0) + (0 if split == "train" else 1), dtype=dtype)
    if kind == "cifar":
        return load_cifar_binary(spec["dir"], split, spec.get("layout"), spec.get("mean", CIFAR100_MEAN),
                                 spec.get("std", CIFAR100_STD), dtype=dtype)
    raise ValueError(f"unknown data kind {kind!r}; expected 'synthetic' or 'cifar'")


def evaluate(ps: ParamStore, cfg: ModelConfig, data: Dataset, batch_size: int = 64):
    """Eval-mode (loss, accuracy) over a whole dataset."""
    correct, total_loss = 0, 0.0
    with no_grad():
        for xb, yb in data.batches(batch_size):
            logits = model_forward(ps, cfg, xb, train=False)
            total_loss += float(cross_entropy(logits, yb).data) * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    n = max(len(data), 1)
    return total_loss / n, correct / n


def locate_nonfinite(ps: ParamStore, cfg: ModelConfig, xb: np.ndarray) -> str:
    """Name the first non-finite tensor: a parameter, or the first op that produced one."""
    for name, t in ps.items():
        if not np.all(np.isfinite(t.data)):
            return f"parameter {name}"
    set_debug(True)
    try:
        with no_grad():
            model_forward(ps, cfg, xb, train=True, update_stats=False)
    except FloatingPointError as exc:
        return str(exc)
    finally:
        set_debug(False)
    return "no non-finite intermediate found on replay (loss overflow)"


def train(rc: RunConfig, log_to_stdout: bool = False) -> TrainLog:
    cfg = rc.model_config().validate()
    dtype = resolve_dtype(rc.dtype)
    data = load_data(rc.data, "train", dtype)
    if cfg.num_classes < data.num_classes:
        raise ValueError(f"model has {cfg.num_classes} classes but data has {data.num_classes}")
    ps = build_model(cfg, rc.seed, rc.dtype)
    opt = AdamW(rc.base_lr, weight_decay=rc.weight_decay)
    rng = np.random.default_rng(rc.seed + 1)

    steps_per_epoch = -(-len(data) // rc.batch_size)
    total = rc.epochs * steps_per_epoch
    warmup = int(round(rc.warmup_epochs * steps_per_epoch))
    if rc.out_dir:
        os.makedirs(rc.out_dir, exist_ok=True)
        with open(os.path.join(rc.out_dir, "run_config.json"), "w") as f:
            json.dump(rc.to_dict(), f, indent=2, sort_keys=True)
    log = TrainLog()
    step = 0
    for epoch in range(rc.epochs):
        losses, hits, seen = [], 0, 0
        for xb, yb in data.batches(rc.batch_size, rng):
            if rc.max_steps is not None and step >= rc.max_steps:
                break
            if rc.hflip or rc.crop_pad:
                xb = random_flip_crop(xb, rng, rc.hflip, rc.crop_pad)
            lr = lr_at(step, total, warmup, rc.base_lr)
            ps.zero_grad()
            with Tape() as tape:
                logits = model_forward(ps, cfg, Tensor(xb), train=True, rng=rng)
                loss = cross_entropy(logits, yb)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at step {step}: "
                                       f"{locate_nonfinite(ps, cfg, xb)}")
            backward(loss, tape)
            opt.step(ps, lr=lr)
            losses.append(value)
            hits += int((logits.data.argmax(axis=1) == yb).sum())
            seen += len(yb)
            step += 1
        if not losses:
            break
        # train accuracy: train-mode predictions on the epoch's minibatches, before each update
        acc = hits / seen
        _, eval_acc = evaluate(ps, cfg, data)
        rec = EpochRecord(epoch, step, lr_at(step, total, warmup, rc.base_lr), float(np.mean(losses)), acc,
                          eval_acc)
        log.records.append(rec)
        if log_to_stdout:
            print(log.lines()[-1], flush=True)
        if acc >= 1.0 and log.steps_to_full_accuracy is None:
            log.steps_to_full_accuracy = step
        if eval_acc >= 1.0 and log.steps_to_full_eval_accuracy is None:
            log.steps_to_full_eval_accuracy = step
        if eval_acc > log.best_acc:
            log.best_acc = eval_acc
            if rc.out_dir:
                save_checkpoint(ps, cfg, os.path.join(rc.out_dir, "best.ckpt"))
        if rc.stop_at_full_accuracy and acc >= 1.0:
            break
    if rc.out_dir:
        save_checkpoint(ps, cfg, os.path.join(rc.out_dir, "last.ckpt"))
        write_logs(log, rc.out_dir)
    log.params = ps
    return log


def write_logs(log: TrainLog, out_dir: str) -> None:
    with open(os.path.join(out_dir, "train_log.txt"), "w") as f:
        f.write("\n".join(log.lines()) + "\n")
    with open(os.path.join(out_dir, "train_log.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "step", "lr", "loss", "train_acc", "eval_acc"])
        for r in log.records:
            w.writerow([r.epoch, r.step, repr(r.lr), repr(r.loss), repr(r.train_acc), repr(r.eval_acc)])
