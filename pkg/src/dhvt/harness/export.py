"""Attention-map export: head-averaged CSV matrices and per-head-token PGM maps."""

from __future__ import annotations

import os
from typing import List, Optional, Sequence, Union

import numpy as np

from ..model import ModelConfig, model_forward
from ..numerics import ParamStore, Tensor, no_grad
from .checkpoint import load_checkpoint


class LayerIndexError(IndexError):
    """Requested encoder layer does not exist."""


def load_image(source: Union[str, np.ndarray], cfg: ModelConfig) -> np.ndarray:
    """A single (C, H, W) float image from an array, a .npy file or (with Pillow) a picture file."""
    if isinstance(source, np.ndarray):
        img = source
    elif source.endswith(".npy"):
        img = np.load(source)
    else:
        try:
            from PIL import Image
        except ImportError:
            raise ValueError(f"{source}: only .npy images are readable without Pillow") from None
        with Image.open(source) as im:
            im = im.convert("RGB").resize(cfg.image_size[::-1])
            img = np.asarray(im, dtype=np.float64).transpose(2, 0, 1) / 255.0
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 4 and img.shape[0] == 1:
        img = img[0]
    expect = (cfg.in_chans, *cfg.image_size)
    if img.shape != expect:
        raise ValueError(f"image shape {img.shape} does not match model input {expect}")
    return img


def write_pgm(path: str, values: np.ndarray) -> None:
    """Binary 8-bit PGM, min-max normalized; a constant map writes all zeros."""
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros(values.shape) if hi <= lo else (values - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    rows, cols = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a P5 PGM")
    cols, rows, maxval = (int(v) for v in fields[1:])
    data = np.frombuffer(blob, dtype=np.uint8, count=rows * cols, offset=pos + 1)
    if maxval != 255:
        raise ValueError(f"{path}: expected maxval 255, got {maxval}")
    return data.reshape(rows, cols)


def export_attention(checkpoint: Union[str, tuple], image: Union[str, np.ndarray],
                     layer_indices: Optional[Sequence[int]], out_dir: str) -> List[str]:
    """Write attention exports for the requested layers and return the written paths.

    Per layer ``k``: ``layer{k}_attention.csv`` holds the head-averaged
    attention matrix (rows are queries). With head tokens enabled, head token
    ``j`` contributes ``layer{k}_head{j}.pgm``: its attention over the patch
    tokens in head ``j``, on the patch grid. Without head tokens the class
    token's row is mapped per head instead (``layer{k}_cls_head{j}.pgm``).
    """
    ps, cfg = load_checkpoint(checkpoint) if isinstance(checkpoint, str) else checkpoint
    if cfg is None:
        raise ValueError("checkpoint carries no model config")
    layers = list(range(cfg.depth)) if layer_indices is None else [int(i) for i in layer_indices]
    for i in layers:
        if not 0 <= i < cfg.depth:
            raise LayerIndexError(f"layer index {i} out of range; valid layers are 0..{cfg.depth - 1}")

    img = load_image(image, cfg)
    dtype = next(iter(ps.values())).dtype if len(ps) else np.float64
    with no_grad():
        _, maps = model_forward(ps, cfg, Tensor(img[None].astype(dtype)), train=False, return_attention=True)

    os.makedirs(out_dir, exist_ok=True)
    n, (gh, gw), h = cfg.num_patches, cfg.grid, cfg.num_heads
    written = []
    for k in layers:
        attn = maps[k][0].astype(np.float64)  # (h, T, T)
        path = os.path.join(out_dir, f"layer{k}_attention.csv")
        np.savetxt(path, attn.mean(axis=0), delimiter=",", fmt="%.10e")
        written.append(path)
        for j in range(h):
            if cfg.use_head_token:
                row, name = attn[j, n + 1 + j, 1:n + 1], f"layer{k}_head{j}.pgm"
            else:
                row, name = attn[j, 0, 1:n + 1], f"layer{k}_cls_head{j}.pgm"
            path = os.path.join(out_dir, name)
            write_pgm(path, row.reshape(gh, gw))
            written.append(path)
    return written
