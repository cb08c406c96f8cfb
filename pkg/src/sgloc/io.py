"""Binary file formats and JSON-lines result output.

Three little-endian container formats share the same style of layout:

  SGLP  parameter checkpoints: magic, version u32, then per record
        (name length u32, name utf-8, dtype tag u8, rank u32, dims u32...,
        row-major payload).
  SGLE  embedding database: magic, version u32, D u32, scene count u32, then
        per scene (scene_id length u32 + utf-8, node count u32, then per node
        node_id u32 + D float32).
  SGLF  feature container: magic, version u32, C_b u32, then per record
        (kind u8, owner_a u32, owner_b u32, rank u32, dims u32..., float32
        payload). Kinds: point_cloud(1), view_levels(2), patch_grid(3).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

SGLP_MAGIC = b"SGLP"
SGLE_MAGIC = b"SGLE"
SGLF_MAGIC = b"SGLF"
FORMAT_VERSION = 1

KIND_POINT_CLOUD = 1
KIND_VIEW_LEVELS = 2
KIND_PATCH_GRID = 3
KIND_NAMES = {KIND_POINT_CLOUD: "point_cloud", KIND_VIEW_LEVELS: "view_levels",
              KIND_PATCH_GRID: "patch_grid"}

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAG_FOR_KIND = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("u1"): 3}


class FormatError(ValueError):
    """A binary container is malformed or internally inconsistent."""


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def _u32(f, what: str) -> int:
    return struct.unpack("<I", _read_exact(f, 4, what))[0]


def _u8(f, what: str) -> int:
    return struct.unpack("<B", _read_exact(f, 1, what))[0]


# ---------------------------------------------------------------------------
# SGLP parameter checkpoints


def save_checkpoint(path, arrays: dict) -> None:
    """Write name -> ndarray records sorted by name (canonical bytes)."""
    with open(path, "wb") as f:
        f.write(SGLP_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            dt = arr.dtype.newbyteorder("<")
            if dt not in _TAG_FOR_KIND:
                raise ValueError(f"unsupported checkpoint dtype {arr.dtype} for '{name}'")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", _TAG_FOR_KIND[dt]))
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype(dt, copy=False).tobytes())


def load_checkpoint(path) -> dict:
    arrays = {}
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != SGLP_MAGIC:
            raise FormatError("not a parameter checkpoint (bad magic)")
        version = _u32(f, "version")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError("truncated record header")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, "record name").decode("utf-8")
            tag = _u8(f, f"dtype tag of '{name}'")
            if tag not in _DTYPE_TAGS:
                raise FormatError(f"unknown dtype tag {tag} for '{name}'")
            rank = _u32(f, f"rank of '{name}'")
            dims = tuple(_u32(f, f"dim of '{name}'") for _ in range(rank))
            count = int(np.prod(dims)) if dims else 1
            dt = _DTYPE_TAGS[tag]
            payload = _read_exact(f, count * dt.itemsize, f"payload of '{name}'")
            arrays[name] = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
    return arrays


def save_checkpoint_with_meta(path, arrays: dict, meta: dict) -> None:
    """Checkpoint plus a JSON metadata record under the reserved name."""
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype="u1")
    save_checkpoint(path, {**arrays, "_meta/json": blob})


def load_checkpoint_with_meta(path):
    arrays = load_checkpoint(path)
    meta_blob = arrays.pop("_meta/json", None)
    meta = json.loads(bytes(meta_blob).decode("utf-8")) if meta_blob is not None else {}
    return arrays, meta


# ---------------------------------------------------------------------------
# SGLE embedding database


def save_embedding_db(path, dim: int, scenes) -> None:
    """scenes: iterable of (scene_id, node_ids, matrix float32 (n, dim))."""
    with open(path, "wb") as f:
        f.write(SGLE_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", dim))
        scenes = list(scenes)
        f.write(struct.pack("<I", len(scenes)))
        for scene_id, node_ids, mat in scenes:
            mat = np.ascontiguousarray(mat, dtype="<f4")
            if mat.shape != (len(node_ids), dim):
                raise ValueError(f"scene {scene_id}: matrix shape {mat.shape} does not match")
            sid = scene_id.encode("utf-8")
            f.write(struct.pack("<I", len(sid)))
            f.write(sid)
            f.write(struct.pack("<I", len(node_ids)))
            for nid, row in zip(node_ids, mat):
                f.write(struct.pack("<I", int(nid)))
                f.write(row.tobytes())


def load_embedding_db(path):
    """Returns (dim, [(scene_id, node_ids int array, matrix float32)])."""
    scenes = []
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != SGLE_MAGIC:
            raise FormatError("not an embedding database (bad magic)")
        version = _u32(f, "version")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported database version {version}")
        dim = _u32(f, "embedding dim")
        n_scenes = _u32(f, "scene count")
        for _ in range(n_scenes):
            sid_len = _u32(f, "scene id length")
            scene_id = _read_exact(f, sid_len, "scene id").decode("utf-8")
            n_nodes = _u32(f, f"node count of {scene_id}")
            node_ids = np.empty(n_nodes, dtype=np.int64)
            mat = np.empty((n_nodes, dim), dtype=np.float32)
            for i in range(n_nodes):
                node_ids[i] = _u32(f, "node id")
                row = _read_exact(f, 4 * dim, "embedding row")
                mat[i] = np.frombuffer(row, dtype="<f4")
            scenes.append((scene_id, node_ids, mat))
        if f.read(1):
            raise FormatError("trailing bytes after the last scene")
    return dim, scenes


def embedding_db_expected_bytes(scene_entries) -> int:
    """Exact byte size the writer will produce for (scene_id, n_nodes, dim)."""
    total = 4 + 4 + 4 + 4
    for scene_id, n_nodes, dim in scene_entries:
        total += 4 + len(scene_id.encode("utf-8")) + 4 + n_nodes * (4 + 4 * dim)
    return total


# ---------------------------------------------------------------------------
# SGLF feature container


@dataclass
class FeatureRecord:
    kind: int
    owner_a: int
    owner_b: int
    array: np.ndarray

    @property
    def key(self):
        return (self.kind, self.owner_a, self.owner_b)


class FeatureContainer:
    """In-memory view of one feature container file."""

    def __init__(self, feature_dim: int, records=None):
        self.feature_dim = int(feature_dim)
        self.records = {}
        for rec in records or []:
            self.add(rec)

    def add(self, rec: FeatureRecord):
        if rec.key in self.records:
            raise ValueError(f"duplicate feature record {rec.key}")
        self.records[rec.key] = rec

    def point_cloud(self, node_id: int) -> np.ndarray:
        return self.records[(KIND_POINT_CLOUD, node_id, 0)].array

    def view_levels(self, node_id: int, view_id: int) -> np.ndarray:
        return self.records[(KIND_VIEW_LEVELS, node_id, view_id)].array

    def patch_grid(self, image_id: int) -> np.ndarray:
        return self.records[(KIND_PATCH_GRID, image_id, 0)].array

    def has(self, kind: int, owner_a: int, owner_b: int = 0) -> bool:
        return (kind, owner_a, owner_b) in self.records

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(SGLF_MAGIC)
            f.write(struct.pack("<I", FORMAT_VERSION))
            f.write(struct.pack("<I", self.feature_dim))
            for key in sorted(self.records):
                rec = self.records[key]
                arr = np.ascontiguousarray(rec.array, dtype="<f4")
                f.write(struct.pack("<BII", rec.kind, rec.owner_a, rec.owner_b))
                f.write(struct.pack("<I", arr.ndim))
                for d in arr.shape:
                    f.write(struct.pack("<I", d))
                f.write(arr.tobytes())

    @classmethod
    def load(cls, path) -> "FeatureContainer":
        with open(path, "rb") as f:
            if _read_exact(f, 4, "magic") != SGLF_MAGIC:
                raise FormatError("not a feature container (bad magic)")
            version = _u32(f, "version")
            if version != FORMAT_VERSION:
                raise FormatError(f"unsupported container version {version}")
            feature_dim = _u32(f, "feature dim")
            container = cls(feature_dim)
            while True:
                head = f.read(1)
                if not head:
                    break
                kind = head[0]
                owner_a = _u32(f, "owner_a")
                owner_b = _u32(f, "owner_b")
                rank = _u32(f, "rank")
                dims = tuple(_u32(f, "dim") for _ in range(rank))
                count = int(np.prod(dims)) if dims else 1
                payload = _read_exact(f, 4 * count, f"payload of record kind {kind}")
                arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
                rec = FeatureRecord(kind, owner_a, owner_b, arr)
                if rec.key in container.records:
                    raise FormatError(f"duplicate record {rec.key}")
                container.records[rec.key] = rec
        return container


def validate_container(path) -> FeatureContainer:
    """Full conformance check of an SGLF file; raises FormatError on defects.

    Checks the header, record framing, declared-dims-vs-payload consistency,
    kind-specific shapes, and that feature dims agree with the header C_b.
    """
    container = FeatureContainer.load(path)
    cb = container.feature_dim
    if cb <= 0:
        raise FormatError("feature dim must be positive")
    for key, rec in container.records.items():
        if rec.kind not in KIND_NAMES:
            raise FormatError(f"unknown record kind {rec.kind}")
        if not np.all(np.isfinite(rec.array)):
            raise FormatError(f"record {key}: non-finite payload")
        if rec.kind == KIND_POINT_CLOUD:
            if rec.array.ndim != 2 or rec.array.shape[1] != 3 or rec.array.shape[0] < 1:
                raise FormatError(f"record {key}: point cloud must be Nx3, got {rec.array.shape}")
        elif rec.kind == KIND_VIEW_LEVELS:
            if rec.array.ndim != 2 or rec.array.shape[1] != cb or rec.array.shape[0] < 1:
                raise FormatError(
                    f"record {key}: view levels must be LxC_b (C_b={cb}), got {rec.array.shape}"
                )
        elif rec.kind == KIND_PATCH_GRID:
            if rec.array.ndim != 3 or rec.array.shape[2] != cb or min(rec.array.shape[:2]) < 1:
                raise FormatError(
                    f"record {key}: patch grid must be HxWxC_b (C_b={cb}), got {rec.array.shape}"
                )
    return container


# ---------------------------------------------------------------------------
# ranking output


def write_rankings_jsonl(path, rankings) -> None:
    """rankings: iterable of (image_id, [(scene_id, score)])."""
    with open(path, "w", encoding="utf-8") as f:
        for image_id, ranked in rankings:
            row = {
                "image_id": int(image_id),
                "ranked": [{"scene_id": sid, "score": float(s)} for sid, s in ranked],
            }
            f.write(json.dumps(row, sort_keys=True) + "\n")
