"""Binary checkpoints.

Layout (all little-endian):
  magic "ULST" | version u32 | param_count u32 |
  per parameter: name_len u16, name bytes (utf-8), rank u8, dims u32 each,
  values f32 | metadata: meta_len u32, JSON bytes {"step": ..., "config": ...}

Values are stored at 32-bit precision; loading restores them bit-exactly at
that precision. Parameter names unknown to the receiving model are rejected.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ULST"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Malformed checkpoint file; message carries the failing byte offset."""


def save_checkpoint(model, path: str | Path, step: int = 0,
                    config: dict | None = None) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    params = model.params()
    chunks.append(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode("utf-8")
        arr = np.ascontiguousarray(p.tensor.data, dtype="<f4")
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    meta = json.dumps({"step": step, "config": config or {}}).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta)))
    chunks.append(meta)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointFormatError(
                f"truncated checkpoint: needed {n} bytes for {what} at offset {self.off}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u8(self, what):
        return struct.unpack("<B", self.take(1, what))[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], int, dict]:
    """Parse a checkpoint into (name -> float64 array, step, config dict)."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic at offset 0")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version} at offset 4")
    count = r.u32("parameter count")
    blobs: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = r.u16(f"name length of parameter {i}")
        name = r.take(name_len, f"name of parameter {i}").decode("utf-8")
        rank = r.u8(f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        n = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * n, f"values of {name}")
        blobs[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float64)
    meta_len = r.u32("metadata length")
    meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    return blobs, int(meta.get("step", 0)), meta.get("config", {})


def load_checkpoint(model, path: str | Path) -> tuple[int, dict]:
    """Restore parameters into an existing model; unknown or missing names
    are rejected."""
    blobs, step, config = read_checkpoint(path)
    own = model.param_dict()
    unknown = sorted(set(blobs) - set(own))
    if unknown:
        raise CheckpointFormatError(f"unknown parameter names: {unknown}")
    missing = sorted(set(own) - set(blobs))
    if missing:
        raise CheckpointFormatError(f"missing parameter names: {missing}")
    for name, arr in blobs.items():
        p = own[name]
        if p.tensor.data.shape != arr.shape:
            raise CheckpointFormatError(
                f"shape mismatch for {name}: file {arr.shape}, model {p.tensor.data.shape}")
        p.tensor.data = arr.copy()
        p.tensor.grad = None
    return step, config
