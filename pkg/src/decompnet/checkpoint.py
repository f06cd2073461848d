"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DCMP"  u32 version
    u32 n    n bytes of UTF-8 JSON metadata (sorted keys, compact)
    u32 count of blobs, then per blob:
        u16 n  name (UTF-8)   u8 ndim   ndim x u32 dims   float32 data
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"DCMP"
VERSION = 1


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class ModelCheckpoint:
    params: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    metadata: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        meta = dump_json(self.metadata).encode()
        parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(self.params))]
        for name, arr in self.params.items():
            raw = name.encode()
            arr = np.ascontiguousarray(arr, dtype="<f4")
            parts.append(struct.pack("<H", len(raw)) + raw + struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes, path=None) -> "ModelCheckpoint":
        reader = _Reader(buf, path)
        magic = reader.take(4, "magic")
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}", offset=0, path=path)
        version, = reader.unpack("<I", "version")
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4, path=path)
        n_meta, = reader.unpack("<I", "metadata length")
        at = reader.pos
        try:
            metadata = json.loads(reader.take(n_meta, "metadata").decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable metadata: {exc}", offset=at, path=path) from None
        count, = reader.unpack("<I", "blob count")
        params = OrderedDict()
        for _ in range(count):
            n_name, = reader.unpack("<H", "name length")
            at = reader.pos
            try:
                name = reader.take(n_name, "name").decode()
            except UnicodeDecodeError:
                raise FormatError("blob name is not UTF-8", offset=at, path=path) from None
            ndim, = reader.unpack("<B", f"{name} ndim")
            shape = reader.unpack(f"<{ndim}I", f"{name} shape")
            n_bytes = 4 * int(np.prod(shape, dtype=np.int64))
            data = reader.take(n_bytes, f"{name} data")
            params[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
        if reader.pos != len(buf):
            raise FormatError(f"{len(buf) - reader.pos} trailing bytes", offset=reader.pos, path=path)
        return cls(params, metadata)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.path, self.pos = buf, path, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, "
                              f"{len(self.buf) - self.pos} left", offset=self.pos, path=self.path)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> ModelCheckpoint:
    return ModelCheckpoint.from_bytes(Path(path).read_bytes(), path=str(path))
