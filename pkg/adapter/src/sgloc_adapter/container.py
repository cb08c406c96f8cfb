"""Standalone reader/writer for the binary feature-container format.

Layout (little endian): magic "SGLF", version u32, C_b u32, then records of
(kind u8, owner_a u32, owner_b u32, rank u32, dims u32 * rank, float32
payload). Record kinds: point_cloud=1, view_levels=2, patch_grid=3.

The writer appends records behind a placeholder header and fixes the C_b
field up on close, so the feature width may be discovered from the first
record.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SGLF"
VERSION = 1
KIND_POINT_CLOUD = 1
KIND_VIEW_LEVELS = 2
KIND_PATCH_GRID = 3

_FEATURE_KINDS = (KIND_VIEW_LEVELS, KIND_PATCH_GRID)


class ContainerWriter:
    """Single-writer append stream with a final header fix-up."""

    def __init__(self, path, feature_dim: int = 0):
        self.path = Path(path)
        self.feature_dim = int(feature_dim)
        self._seen = set()
        self._file = open(self.path, "wb")
        self._file.write(MAGIC)
        self._file.write(struct.pack("<I", VERSION))
        self._file.write(struct.pack("<I", self.feature_dim))

    def add(self, kind: int, owner_a: int, owner_b: int, array: np.ndarray) -> None:
        key = (kind, owner_a, owner_b)
        if key in self._seen:
            raise ValueError(f"duplicate record {key}")
        arr = np.ascontiguousarray(array, dtype="<f4")
        if kind in _FEATURE_KINDS:
            width = int(arr.shape[-1])
            if self.feature_dim == 0:
                self.feature_dim = width
            elif width != self.feature_dim:
                raise ValueError(f"record {key}: feature width {width} != {self.feature_dim}")
        self._seen.add(key)
        self._file.write(struct.pack("<BII", kind, owner_a, owner_b))
        self._file.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            self._file.write(struct.pack("<I", d))
        self._file.write(arr.tobytes())

    def close(self) -> None:
        self._file.seek(8)
        self._file.write(struct.pack("<I", self.feature_dim))
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_container(path):
    """Returns (feature_dim, {(kind, owner_a, owner_b): array})."""
    records = {}
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a feature container")
        version = struct.unpack("<I", f.read(4))[0]
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        feature_dim = struct.unpack("<I", f.read(4))[0]
        while True:
            head = f.read(1)
            if not head:
                break
            kind = head[0]
            owner_a, owner_b = struct.unpack("<II", f.read(8))
            rank = struct.unpack("<I", f.read(4))[0]
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
            count = int(np.prod(dims)) if dims else 1
            payload = f.read(4 * count)
            if len(payload) != 4 * count:
                raise ValueError(f"{path}: truncated record")
            records[(kind, owner_a, owner_b)] = np.frombuffer(
                payload, dtype="<f4").reshape(dims).copy()
    return feature_dim, records
