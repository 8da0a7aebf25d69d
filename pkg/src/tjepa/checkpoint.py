"""Binary container of named float32 tensors with a config hash.

Layout: magic, format version, config-hash string, a JSON metadata blob,
then each tensor as (name length, name, rank, dims, row-major float32
payload). Loading verifies magic, version, completeness, and optionally
that the config hash matches the caller's expectation, refusing silent
reuse of checkpoints from a different configuration.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError

_MAGIC = b"TJCK"
_VERSION = 1


def save_container(path: str, tensors: dict[str, np.ndarray], config_hash: str, meta: dict) -> None:
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    hash_blob = config_hash.encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, len(hash_blob), len(meta_blob)))
        fh.write(hash_blob)
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float32)
            if arr.ndim and not arr.flags.c_contiguous:
                arr = np.ascontiguousarray(arr)
            name_b = name.encode()
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint (wanted {n} more bytes)")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_container(path: str, expect_hash: str | None = None) -> tuple[dict[str, np.ndarray], dict, str]:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(4) != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u32()
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    hash_len = r.u32()
    meta_len = r.u32()
    config_hash = r.take(hash_len).decode()
    meta = json.loads(r.take(meta_len))
    if expect_hash is not None and config_hash != expect_hash:
        raise CheckpointError(
            f"{path}: config hash mismatch ({config_hash[:12]}... != {expect_hash[:12]}...); "
            "refusing to load a checkpoint from a different configuration"
        )
    n = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = r.take(count * 4)
        tensors[name] = np.frombuffer(payload, dtype=np.float32).reshape(dims).copy()
    if r.off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.off} trailing bytes after last tensor")
    return tensors, meta, config_hash
