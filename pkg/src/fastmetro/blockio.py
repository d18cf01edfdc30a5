"""Binary container of named float64 arrays, shared by checkpoints and dataset blobs.

Layout (all integers little-endian)::

    magic        8 bytes
    version      uint32
    meta_len     uint32, then meta_len bytes of UTF-8 JSON
    block_count  uint32
    per block:   name_len uint32, name (UTF-8), rank uint32,
                 rank x uint64 extents, prod(extents) x float64 (LE)

Readers report the byte offset at which a damaged file stops making sense.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def encode(magic: bytes, meta: dict, blocks: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [magic, _U32.pack(FORMAT_VERSION), _U32.pack(len(meta_bytes)), meta_bytes,
             _U32.pack(len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        parts += [_U32.pack(len(raw_name)), raw_name, _U32.pack(arr.ndim)]
        parts += [_U64.pack(n) for n in arr.shape]
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(data: bytes, magic: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    reader = _Reader(data, source)
    if reader.take(8, "magic") != magic:
        raise DataError(f"{source}: bad magic at byte 0 (expected {magic!r})")
    version = reader.u32("format version")
    if version != FORMAT_VERSION:
        raise DataError(f"{source}: unsupported format version {version} (expected {FORMAT_VERSION})")
    meta_at = reader.pos
    meta_raw = reader.take(reader.u32("metadata length"), "metadata")
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError(f"{source}: unreadable metadata at byte {meta_at}") from None
    blocks: dict[str, np.ndarray] = {}
    for _ in range(reader.u32("block count")):
        name_at = reader.pos
        try:
            name = reader.take(reader.u32("block name length"), "block name").decode("utf-8")
        except UnicodeDecodeError:
            raise DataError(f"{source}: unreadable block name at byte {name_at}") from None
        rank = reader.u32(f"rank of {name!r}")
        shape = tuple(reader.u64(f"extent of {name!r}") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.uint64)) if shape else 1
        raw = reader.take(8 * count, f"data of {name!r}")
        if name in blocks:
            raise DataError(f"{source}: duplicate block {name!r} at byte {name_at}")
        blocks[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if reader.pos != len(data):
        raise DataError(f"{source}: {len(data) - reader.pos} trailing bytes after byte {reader.pos}")
    return meta, blocks


def write(path, magic: bytes, meta: dict, blocks: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(magic, meta, blocks))


def read(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    return decode(data, magic, str(path))


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise DataError(f"{self.source}: truncated at byte {len(self.data)} while reading {what} "
                            f"(needed bytes {self.pos}..{end})")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(8, what))[0]
