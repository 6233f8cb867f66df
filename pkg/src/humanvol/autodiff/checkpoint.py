"""Binary parameter checkpoints.

Layout (little-endian)::

    b"DHCK" | version u32 | count u32 |
    count x { name_len u32 | name utf-8 | rank u32 | extents u32[rank] | float32[prod(extents)] }
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DHCK"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            if name in out:
                raise CheckpointFormatError(f"{path}: duplicate tensor name {name!r}")
            out[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise CheckpointFormatError(f"{path}: truncated checkpoint ({exc})") from exc
    if pos != len(buf):
        raise CheckpointFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
