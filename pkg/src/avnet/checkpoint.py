"""Binary checkpoint container.

Layout (little-endian)::

    b"AVNET\\x01"
    u32 tensor count
    per tensor: u16 name length, name (utf-8), u8 dtype code, u8 rank,
                u32 dims[rank], raw row-major data
    u32 CRC32 of every preceding byte

Scalars and the JSON config snapshot travel as ordinary tensors under
``meta/`` keys, so the container itself has a single record type.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"AVNET\x01"
FORMAT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1"), 4: np.dtype("<i4")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Named arrays grouped by key prefix.

    ``param/`` trainable tensors, ``buffer/`` BN running moments, ``optim/``
    optimizer state, ``meta/`` iteration, split seed and config JSON.
    """

    tensors: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def section(self, prefix: str) -> dict:
        p = prefix.rstrip("/") + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    @property
    def params(self) -> dict:
        return self.section("param")

    @property
    def config(self) -> dict:
        raw = self.tensors.get("meta/config")
        return {} if raw is None else json.loads(bytes(raw).decode("utf-8"))

    @property
    def iteration(self) -> int:
        return int(self.tensors.get("meta/iteration", np.zeros(1, np.int64))[0])

    @property
    def split_seed(self) -> int:
        return int(self.tensors.get("meta/split_seed", np.zeros(1, np.int64))[0])

    def to_bytes(self) -> bytes:
        return encode(self.tensors)

    def save(self, path) -> None:
        save_checkpoint(self, path)


def meta_tensors(config: dict, iteration: int, split_seed: int) -> dict:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return {
        "meta/config": np.frombuffer(blob, dtype=np.uint8).copy(),
        "meta/iteration": np.array([iteration], dtype=np.int64),
        "meta/split_seed": np.array([split_seed], dtype=np.int64),
    }


def encode(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> dict:
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"checkpoint too short ({len(blob)} bytes)")
    if blob[:5] != MAGIC[:5]:
        raise CheckpointError("bad magic: not an AVNET checkpoint")
    if blob[5] != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob[5]}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is truncated or corrupt")

    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("checkpoint ends mid-record")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(take(n), dtype=dt).reshape(dims).copy()
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after last tensor")
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return Checkpoint(decode(path.read_bytes()))
