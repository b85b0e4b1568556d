"""Binary checkpoint format for model parameters.

Layout (all integers little-endian u32):

    magic "IMAD" | format version | config length | config JSON (UTF-8) |
    parameter count | records

Each record is: name length, name (UTF-8), ndim, one extent per dim, then the
row-major float64 payload (little-endian).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"IMAD"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(path, config: dict, params) -> None:
    """Write ``config`` plus name->Tensor/ndarray ``params`` to ``path``."""
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg)))
    chunks.append(cfg)
    chunks.append(struct.pack("<I", len(params)))
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Read a checkpoint; returns (config dict, name -> float64 ndarray)."""
    blob = Path(path).read_bytes()
    reader = _Reader(blob, path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})"
        )
    cfg_len = reader.u32()
    try:
        config = json.loads(reader.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block: {exc}") from exc
    params = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        ndim = reader.u32()
        shape = tuple(reader.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(shape)
        params[name] = data.astype(np.float64)
    return config, params


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]
