"""Binary checkpoint format.

Layout (little-endian)::

    b"CHKD" | u32 version (=1) | u32 tensor count
    per tensor: u16 name length | UTF-8 path | u8 rank | u32 dims[rank] | f32 payload
    optional sections, each introduced by a 4-byte tag:
      b"ADAM": u64 step | per tensor, in the order above: f32 m | f32 v
      b"RNG0": u32 length | UTF-8 JSON (bit-generator state and training position)
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CHKD"
VERSION = 1
MAX_ELEMENTS = 1 << 31


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class DimensionOverflowError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict            # name -> float32 ndarray, in file order
    adam_step: int | None = None
    adam_m: dict | None = None
    adam_v: dict | None = None
    rng: dict | None = None


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def dumps(tensors: dict, adam=None, rng: dict | None = None) -> bytes:
    """Serialize ``tensors`` (name -> array, written in sorted order).

    ``adam`` is ``(step, m, v)`` with m and v keyed like ``tensors``.
    """
    names = sorted(tensors)
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(names)))
    for name in names:
        a = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", a.ndim))
        out.write(struct.pack(f"<{a.ndim}I", *a.shape))
        out.write(_f32(a))
    if adam is not None:
        step, m, v = adam
        out.write(b"ADAM")
        out.write(struct.pack("<Q", step))
        for name in names:
            out.write(_f32(m[name]))
            out.write(_f32(v[name]))
    if rng is not None:
        payload = json.dumps(rng, sort_keys=True).encode("utf-8")
        out.write(b"RNG0")
        out.write(struct.pack("<I", len(payload)))
        out.write(payload)
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def take(self, n: int, what: str) -> bytes:
        if n > self.remaining():
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def floats(self, shape, what: str) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if count > MAX_ELEMENTS:
            raise DimensionOverflowError(f"{what}: {shape} has {count} elements, limit {MAX_ELEMENTS}")
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def loads(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {buf[:4]!r})")
    r = _Reader(buf)
    r.pos = 4
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} unsupported (expected {VERSION})")
    tensors = {}
    shapes = {}
    for i in range(count):
        (nlen,) = r.unpack("<H", f"tensor {i} name length")
        try:
            name = r.take(nlen, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor {i} name is not UTF-8") from None
        (rank,) = r.unpack("<B", f"{name} rank")
        dims = r.unpack(f"<{rank}I", f"{name} dims")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor path {name}")
        tensors[name] = r.floats(dims, name)
        shapes[name] = dims
    ckpt = Checkpoint(tensors)
    while r.remaining():
        tag = r.take(4, "section tag")
        if tag == b"ADAM":
            (ckpt.adam_step,) = r.unpack("<Q", "adam step")
            ckpt.adam_m, ckpt.adam_v = {}, {}
            for name in tensors:
                ckpt.adam_m[name] = r.floats(shapes[name], f"adam m {name}")
                ckpt.adam_v[name] = r.floats(shapes[name], f"adam v {name}")
        elif tag == b"RNG0":
            (n,) = r.unpack("<I", "rng length")
            ckpt.rng = json.loads(r.take(n, "rng payload").decode("utf-8"))
        else:
            raise CheckpointError(f"unknown checkpoint section {tag!r}")
    return ckpt


def save_checkpoint(path, tensors: dict, adam=None, rng: dict | None = None) -> None:
    """Write atomically: a crash mid-write leaves the previous checkpoint intact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(tensors, adam, rng))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with path.open("rb") as f:
        head = f.read(4)
        if head != MAGIC:
            raise BadMagicError(f"{path}: not a checkpoint (magic {head!r})")
        return loads(head + f.read())
