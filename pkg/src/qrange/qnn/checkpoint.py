"""Flat binary checkpoints.

Layout (little-endian)::

    b"QRLB"  u32 version
    repeated until EOF:
        u16 name length, name bytes (utf-8), u8 rank, u32 extent * rank,
        f32 payload (row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"QRLB"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def loads(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    pos, out = 8, {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{rank}I", data, pos + 1)
            pos += 1 + 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 4 * count > len(data):
                raise CheckpointError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(data, "<f4", count, pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint: {e}") from None
    return out


def save_checkpoint(model, path) -> None:
    tensors = {**model.named_params(), **model.named_buffers()}
    Path(path).write_bytes(dumps(tensors))


def load_checkpoint(model, path) -> None:
    for name, arr in loads(Path(path).read_bytes()).items():
        model.set_param(name, arr)
