"""Self-describing binary weight files.

Layout: magic "DRNW1", then per tensor (sorted by name for reproducible
bytes): u32 name length, name UTF-8, u32 rank, rank u32 extents, payload
as little-endian float64.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"DRNW1"


def dump_tensors(named: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC]
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name], dtype="<f8")
        enc = name.encode("utf-8")
        out.append(struct.pack("<I", len(enc)))
        out.append(enc)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dump_tensors(named))


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise ValidationError(f"{path}: not a DRNW1 checkpoint")
    pos = len(MAGIC)
    named: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (name_len,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            named[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise ValidationError(f"{path}: truncated or corrupt checkpoint") from exc
    return named


def digest(path) -> str:
    """SHA-256 of a checkpoint file, for phase-isolation assertions."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
