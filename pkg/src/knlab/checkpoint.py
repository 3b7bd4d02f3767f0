"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"KNLB"  u32 version
    u32 header length, UTF-8 JSON {"config": ..., "metadata": ...}
    u32 record count
    per record: u32 name length, UTF-8 name, u32 ndim, u32 dims[ndim],
                float64 data (row-major)
    u64 checksum: first 8 bytes of BLAKE2b over every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .exceptions import CheckpointError
from .model import ModelConfig, TransformerLM

MAGIC = b"KNLB"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    metadata: dict[str, Any] = field(default_factory=dict)
    version: int = VERSION

    def model(self) -> TransformerLM:
        return TransformerLM(self.config, self.weights)


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps({"config": ckpt.config.to_dict(), "metadata": ckpt.metadata},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header,
             struct.pack("<I", len(ckpt.weights))]
    for name in sorted(ckpt.weights):
        arr = np.ascontiguousarray(ckpt.weights[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + _checksum(body)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointError(f"not a knlab checkpoint (bad magic bytes {data[:4]!r}); expected format version {VERSION}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, this build reads version {VERSION}")
    if len(data) < 16:
        raise CheckpointError("checkpoint truncated")
    body, stored = data[:-8], data[-8:]
    if _checksum(body) != stored:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted file)")
    try:
        offset = 8
        (hlen,) = struct.unpack_from("<I", body, offset)
        offset += 4
        header = json.loads(body[offset:offset + hlen].decode("utf-8"))
        offset += hlen
        (count,) = struct.unpack_from("<I", body, offset)
        offset += 4
        weights = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, offset)
            offset += 4
            name = body[offset:offset + nlen].decode("utf-8")
            offset += nlen
            (ndim,) = struct.unpack_from("<I", body, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", body, offset)
            offset += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=offset).reshape(shape)
            offset += 8 * size
            weights[name] = arr.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if offset != len(body):
        raise CheckpointError("trailing bytes before checksum")
    return Checkpoint(ModelConfig.from_dict(header["config"]), weights, header.get("metadata", {}), version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
