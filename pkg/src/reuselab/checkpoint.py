"""Bit-exact binary checkpoint format.

Little-endian layout: magic "RLAB", format version (u32), an 8-byte
architecture hash, then one record per tensor: name length (u32), name
bytes (utf-8), rank (u32), dims (u32 each), f32 payload. Records run to
end of file.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ModelWeights, arch_hash

MAGIC = b"RLAB"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_weights(path, weights: ModelWeights) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), arch_hash()]
    for name in sorted(weights.tensors):
        t = np.ascontiguousarray(weights.tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(t.tobytes())
    path.write_bytes(b"".join(chunks))


def load_weights(path) -> ModelWeights:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if blob[8:16] != arch_hash():
        raise CheckpointError(f"{path}: architecture hash mismatch")
    off = 16
    tensors = {}
    while off < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(dims))
        payload = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        tensors[name] = payload.reshape(dims).astype(np.float32)
    return ModelWeights(tensors)
