"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"FGPC" | u16 version | u32 n | spec JSON (n bytes)
    u32 tensor count
    per tensor: u16 n | name (n bytes, "layer.field") | u8 rank | rank x u32 extents | float32 data
    u8 has_plan [| u32 n | plan JSON (n bytes)]
    u32 CRC32 of everything above
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .models import Model, ModelSpec, ModelState
from .select import RetentionPlan

MAGIC = b"FGPC"
VERSION = 1


def _block(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def to_bytes(model: Model, plan: RetentionPlan | None = None) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<H", VERSION)
    out += _block(model.spec.to_json().encode("utf-8"))
    named = list(model.state.named_arrays())
    out += struct.pack("<I", len(named))
    for name, arr in named:
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    if plan is None:
        out += b"\x00"
    else:
        out += b"\x01" + _block(plan.to_json().encode("utf-8"))
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        b = self.raw[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def block(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)


def from_bytes(raw: bytes):
    """Returns ``(model, plan_or_None)`` with float32 weights."""
    if len(raw) < 10 or raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version > VERSION:
        raise CheckpointError(f"checkpoint version {version} is newer than supported {VERSION}")
    try:
        spec = ModelSpec.from_json(r.block().decode("utf-8"))
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"bad model description: {e}") from e
    layers = [{} for _ in spec.layers]
    (count,) = r.unpack("<I")
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
        idx, _, field = name.partition(".")
        if not idx.isdigit() or int(idx) >= len(layers) or not field:
            raise CheckpointError(f"tensor name {name!r} does not address a layer")
        layers[int(idx)][field] = arr
    (has_plan,) = r.unpack("<B")
    plan = RetentionPlan.from_json(r.block().decode("utf-8")) if has_plan else None
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes before CRC")
    try:
        model = Model(spec, ModelState(layers))
    except ValueError as e:
        raise CheckpointError(f"tensors do not match the model description: {e}") from e
    return model, plan


def save(path, model: Model, plan: RetentionPlan | None = None) -> None:
    Path(path).write_bytes(to_bytes(model, plan))


def load(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return from_bytes(raw)
