"""Binary checkpoint container.

Layout (little endian)::

    magic   8 bytes  b"ECGPCKPT"
    version u32
    cfg_len u32, model config as UTF-8 JSON
    count   u32
    count x { name_len u16, name, ndim u8, dims u32*ndim, float32 data }

Parameters are stored under their own names, batch-norm statistics under
``buffer:<name>``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams

MAGIC = b"ECGPCKPT"
VERSION = 1
_BUFFER = "buffer:"


class CheckpointError(ValueError):
    pass


def save_checkpoint(mp: ModelParams, path) -> Path:
    path = Path(path)
    blobs = [(k, v) for k, v in mp.params.items()] + \
            [(_BUFFER + k, v) for k, v in mp.buffers.items()]
    cfg = json.dumps(mp.config.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(blobs))]
    for name, arr in blobs:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path.write_bytes(b"".join(parts))
    return path


def load_checkpoint(path) -> ModelParams:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    try:
        version, cfg_len = take("<II")
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        cfg = ModelConfig.from_dict(json.loads(buf[pos:pos + cfg_len].decode()))
        pos += cfg_len
        (count,) = take("<I")
        params, buffers = {}, {}
        for _ in range(count):
            (nlen,) = take("<H")
            name = buf[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = take("<B")
            shape = take(f"<{ndim}I")
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
            if name.startswith(_BUFFER):
                buffers[name[len(_BUFFER):]] = arr.astype(np.float64)
            else:
                params[name] = arr
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    return ModelParams(cfg, params, buffers)
