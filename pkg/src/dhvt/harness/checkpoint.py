"""Binary checkpoint format.

All integers little-endian::

    b"DHVT"                      magic
    u32  version                 (currently 1)
    --- payload (covered by the trailing CRC32) ---
    u32  config length, then UTF-8 JSON of the model config (``null`` allowed)
    u32  tensor count
    per tensor:
        u32 name length, UTF-8 name
        u32 rank, then rank x u64 extents
        u8  dtype tag (0 = f32, 1 = f64)
        raw little-endian values, row-major
    --- end payload ---
    u32  CRC32 of the payload

Tensors whose name ends in ``running_mean``/``running_var`` load as
non-trainable buffers; everything else is trainable.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from typing import Optional, Tuple

import numpy as np

from ..model import ModelConfig, build_model
from ..numerics import ParamStore, Tensor
from ..numerics.params import is_buffer_name

MAGIC = b"DHVT"
VERSION = 1
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {v: k for k, v in _TAGS.items()}


class CheckpointFormatError(ValueError):
    """Bad magic, unsupported version, corruption or truncation."""


class CheckpointConsistencyError(ValueError):
    """Tensor table does not match what the stored config builds."""


def dumps(ps: ParamStore, cfg: Optional[ModelConfig]) -> bytes:
    body = io.BytesIO()
    cfg_bytes = json.dumps(None if cfg is None else cfg.to_dict(), sort_keys=True).encode("utf-8")
    body.write(struct.pack("<I", len(cfg_bytes)))
    body.write(cfg_bytes)
    body.write(struct.pack("<I", len(ps)))
    for name, t in ps.items():
        nb = name.encode("utf-8")
        body.write(struct.pack("<I", len(nb)))
        body.write(nb)
        body.write(struct.pack("<I", t.ndim))
        body.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        if t.dtype not in _TAGS:
            raise TypeError(f"{name}: unsupported dtype {t.dtype}")
        body.write(struct.pack("<B", _TAGS[t.dtype]))
        body.write(np.ascontiguousarray(t.data, dtype=t.dtype.newbyteorder("<")).tobytes())
    payload = body.getvalue()
    return MAGIC + struct.pack("<I", VERSION) + payload + struct.pack("<I", zlib.crc32(payload))


def loads(blob: bytes, check_consistency: bool = True) -> Tuple[ParamStore, Optional[ModelConfig]]:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointFormatError("not a DHVT checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}; this build reads {VERSION}")
    payload, (crc,) = blob[8:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointFormatError("checkpoint payload CRC32 mismatch (file corrupted)")

    pos = 0

    def take(fmt: str):
        nonlocal pos
        vals = struct.unpack_from(fmt, payload, pos)
        pos += struct.calcsize(fmt)
        return vals

    def take_bytes(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(payload):
            raise CheckpointFormatError("checkpoint truncated")
        out = payload[pos:pos + n]
        pos += n
        return out

    try:
        (clen,) = take("<I")
        cfg_json = json.loads(take_bytes(clen).decode("utf-8"))
        cfg = None if cfg_json is None else ModelConfig.from_dict(cfg_json)
        (count,) = take("<I")
        ps = ParamStore()
        for _ in range(count):
            (nlen,) = take("<I")
            name = take_bytes(nlen).decode("utf-8")
            (rank,) = take("<I")
            shape = take(f"<{rank}Q") if rank else ()
            (tag,) = take("<B")
            if tag not in _DTYPES:
                raise CheckpointFormatError(f"{name}: unknown dtype tag {tag}")
            dt = _DTYPES[tag]
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(take_bytes(n * dt.itemsize), dtype=dt.newbyteorder("<")).astype(dt).reshape(shape)
            ps[name] = Tensor(arr, requires_grad=not is_buffer_name(name), name=name)
    except struct.error as exc:
        raise CheckpointFormatError(f"checkpoint truncated: {exc}") from None
    if pos != len(payload):
        raise CheckpointFormatError(f"{len(payload) - pos} trailing bytes after tensor table")

    if check_consistency and cfg is not None:
        _check_against_config(ps, cfg)
    return ps, cfg


def _check_against_config(ps: ParamStore, cfg: ModelConfig) -> None:
    ref = build_model(cfg, materialize=False)
    if len(ref) != len(ps):
        raise CheckpointConsistencyError(f"config builds {len(ref)} tensors but checkpoint holds {len(ps)}")
    for (rn, rt), (n, t) in zip(ref.items(), ps.items()):
        if rn != n or rt.shape != t.shape:
            raise CheckpointConsistencyError(f"tensor mismatch: config expects {rn} {rt.shape}, file has {n} {t.shape}")


def save_checkpoint(ps: ParamStore, cfg: Optional[ModelConfig], path: str) -> None:
    blob = dumps(ps, cfg)
    with open(path, "wb") as f:
        f.write(blob)


def load_checkpoint(path: str, check_consistency: bool = True) -> Tuple[ParamStore, Optional[ModelConfig]]:
    with open(path, "rb") as f:
        return loads(f.read(), check_consistency)
