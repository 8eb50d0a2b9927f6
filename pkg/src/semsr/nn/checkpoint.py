"""Binary checkpoint format.

Layout (little-endian)::

    b"SEMSR1"
    repeated per parameter:
        u32 name length, name (utf-8), u32 rank, u32 dims[rank],
        f32 values[n], f32 m[n], f32 v[n]
    u64 step counter

The parameter list runs until the final 8 bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SEMSR1"


def save_checkpoint(path: str | Path, entries: list[tuple[str, np.ndarray, np.ndarray, np.ndarray]], step: int) -> None:
    """``entries`` are (name, values, m, v) tuples."""
    chunks = [MAGIC]
    for name, value, m, v in entries:
        raw = name.encode("utf-8")
        value = np.asarray(value)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        for arr in (value, m, v):
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    chunks.append(struct.pack("<Q", int(step)))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]], int]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    end = len(raw) - 8
    out: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    while pos < end:
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arrs = []
        for _ in range(3):
            arrs.append(np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32))
            pos += 4 * n
        out[name] = tuple(arrs)
    if pos != end:
        raise ValueError(f"{path}: truncated or corrupt checkpoint")
    (step,) = struct.unpack_from("<Q", raw, end)
    return out, step
