"""Binary named-tensor checkpoints.

Layout (all integers unsigned 64-bit little-endian)::

    MAGIC
    repeated until EOF:
        name_len, name (UTF-8), rank, extents[rank], data (float64 LE, row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DWTNCKPT"
_U64 = struct.Struct("<Q")


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        parts.append(_U64.pack(len(raw)))
        parts.append(raw)
        parts.append(_U64.pack(arr.ndim))
        parts.extend(_U64.pack(n) for n in arr.shape)
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def u64() -> int:
        nonlocal pos
        (v,) = _U64.unpack_from(buf, pos)
        pos += 8
        return v

    out: dict[str, np.ndarray] = {}
    while pos < len(buf):
        n = u64()
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        shape = tuple(u64() for _ in range(u64()))
        count = int(np.prod(shape, dtype=np.int64))
        end = pos + 8 * count
        if end > len(buf):
            raise ValueError(f"{path}: truncated record {name!r}")
        out[name] = np.frombuffer(buf[pos:end], dtype="<f8").reshape(shape).astype(np.float64)
        pos = end
    return out
