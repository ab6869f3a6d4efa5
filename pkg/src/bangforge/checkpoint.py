"""Versioned binary checkpoints for resumable, deterministic training.

File layout (little-endian):

    8s   magic  b"BANGCKPT"
    u32  format version (currently 1)
    u64  iteration
    32s  training-config digest (sha256 of the canonical run config)
    u32  meta length, then canonical JSON: arch id, normalization, RNG state
    u32  tensor count, then per tensor:
         u16 name length, name utf-8, u8 ndim, u32 dims..., float64 data
    u32  momentum tensor count, same per-tensor encoding
    u32  CRC32 of everything above

The JSON is dumped with sorted keys and compact separators, so a load
followed by a save reproduces the input bytes exactly.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

MAGIC = b"BANGCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptPayload(CheckpointError):
    pass


@dataclass
class Checkpoint:
    """A full training snapshot: weights, optimizer state, RNG state, identity."""

    iteration: int
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    rng_state: dict
    config_digest: bytes = b"\x00" * 32
    meta: dict = field(default_factory=dict)

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            iteration=self.iteration,
            params={k: v.copy() for k, v in self.params.items()},
            momentum={k: v.copy() for k, v in self.momentum.items()},
            rng_state=json.loads(json.dumps(self.rng_state)),
            config_digest=self.config_digest,
            meta=json.loads(json.dumps(self.meta)),
        )


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.payload):
            raise CorruptPayload(f"payload truncated at byte {self.pos}")
        out = self.payload[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_tensors(r: _Reader) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n_items = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = r.take(n_items * 8)
        tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    return tensors


def save_checkpoint(ckpt: Checkpoint, sink: BinaryIO) -> None:
    if len(ckpt.config_digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    meta_blob = _canonical_json({"meta": ckpt.meta, "rng_state": ckpt.rng_state})
    body = b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<Q", ckpt.iteration),
        ckpt.config_digest,
        struct.pack("<I", len(meta_blob)),
        meta_blob,
        _pack_tensors(ckpt.params),
        _pack_tensors(ckpt.momentum),
    ])
    sink.write(body)
    sink.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(source: BinaryIO) -> Checkpoint:
    raw = source.read()
    if len(raw) < len(MAGIC) + 4:
        raise CorruptPayload("file too short for header")
    if raw[:len(MAGIC)] != MAGIC:
        raise VersionMismatch(f"not a checkpoint file (magic {raw[:8]!r})")
    body, (stored_crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != stored_crc:
        raise CorruptPayload("checksum mismatch")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatch(f"format version {version}, expected {VERSION}")
    (iteration,) = r.unpack("<Q")
    digest = r.take(32)
    (meta_len,) = r.unpack("<I")
    try:
        blob = json.loads(r.take(meta_len).decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptPayload(f"bad meta JSON: {exc}") from exc
    params = _unpack_tensors(r)
    momentum = _unpack_tensors(r)
    if r.pos != len(body):
        raise CorruptPayload(f"{len(body) - r.pos} trailing bytes")
    return Checkpoint(
        iteration=iteration,
        params=params,
        momentum=momentum,
        rng_state=blob["rng_state"],
        config_digest=digest,
        meta=blob["meta"],
    )


def save_checkpoint_file(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as sink:
        save_checkpoint(ckpt, sink)


def load_checkpoint_file(path) -> Checkpoint:
    with open(path, "rb") as source:
        return load_checkpoint(source)
