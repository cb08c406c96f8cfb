"""Map database, patch-to-node nearest-neighbor matching, and scene ranking.

Stored embeddings are float32 unit vectors; all distances and scores are
computed in float64. Brute force over contiguous rows is the default search;
an exact kd-tree (full backtracking) kicks in for large scenes. Both paths
return identical (node_id, distance) answers, ties resolved to the lowest
node_id.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .io import load_embedding_db, save_embedding_db

# scenes above this node count get a kd-tree; brute force below
KDTREE_MIN_NODES = 512


@dataclass
class SceneScore:
    scene_id: str
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"scene score {self.score} outside [0, 1]")


@dataclass
class MatchResult:
    """Per-patch correspondences against one scene."""

    scene_id: str
    node_ids: np.ndarray
    distances: np.ndarray


class _KdNode:
    __slots__ = ("axis", "threshold", "left", "right", "indices")

    def __init__(self, axis=-1, threshold=0.0, left=None, right=None, indices=None):
        self.axis = axis
        self.threshold = threshold
        self.left = left
        self.right = right
        self.indices = indices          # leaf payload


class KdTree:
    """Exact nearest-neighbor search over unit vectors.

    Splits on the axis of largest spread; leaves hold up to `leaf_size` rows.
    The search backtracks whenever the splitting plane could hide a point at
    the current best squared distance (<=, so exact ties are still found), and
    candidates are ordered by (squared distance, node_id).
    """

    def __init__(self, vectors: np.ndarray, node_ids: np.ndarray, leaf_size: int = 16):
        self.vectors = np.asarray(vectors, dtype=np.float64)
        self.node_ids = np.asarray(node_ids, dtype=np.int64)
        self.leaf_size = leaf_size
        self.root = self._build(np.arange(len(self.vectors)))

    def _build(self, indices: np.ndarray) -> _KdNode:
        if indices.size <= self.leaf_size:
            return _KdNode(indices=indices)
        pts = self.vectors[indices]
        spreads = pts.max(axis=0) - pts.min(axis=0)
        axis = int(np.argmax(spreads))
        if spreads[axis] <= 0.0:
            return _KdNode(indices=indices)   # all points identical on every axis
        values = pts[:, axis]
        order = np.argsort(values, kind="stable")
        mid = indices.size // 2
        threshold = float(values[order[mid]])
        left = indices[order[:mid]]
        right = indices[order[mid:]]
        if left.size == 0 or right.size == 0:
            return _KdNode(indices=indices)
        return _KdNode(axis=axis, threshold=threshold,
                       left=self._build(left), right=self._build(right))

    def nearest(self, query: np.ndarray) -> Tuple[int, float]:
        """Returns (row index, squared distance) of the exact nearest row."""
        q = np.asarray(query, dtype=np.float64)
        best = [np.inf, -1, -1]  # squared distance, node_id, row

        def visit(node: _KdNode):
            if node.indices is not None:
                diffs = self.vectors[node.indices] - q
                d2 = np.einsum("ij,ij->i", diffs, diffs)
                for dist, row in zip(d2, node.indices):
                    key = (dist, int(self.node_ids[row]))
                    if key < (best[0], best[1]):
                        best[0], best[1], best[2] = dist, key[1], int(row)
                return
            diff = q[node.axis] - node.threshold
            near, far = (node.left, node.right) if diff < 0 else (node.right, node.left)
            visit(near)
            if diff * diff <= best[0]:
                visit(far)

        visit(self.root)
        return best[2], best[0]


@dataclass
class EmbeddingIndex:
    """Per-scene store of unit node embeddings with exact NN queries."""

    scene_id: str
    node_ids: np.ndarray
    vectors: np.ndarray              # (n, D) float32 unit rows
    tree: Optional[KdTree] = None

    def __post_init__(self):
        self.node_ids = np.asarray(self.node_ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != self.node_ids.shape[0]:
            raise ValueError("embedding matrix and node ids disagree")
        if self.vectors.shape[0] < 1:
            raise ValueError(f"scene {self.scene_id}: empty index")
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError(f"scene {self.scene_id}: rows must be unit-normalized")
        order = np.argsort(self.node_ids, kind="stable")
        self.node_ids = self.node_ids[order]
        self.vectors = self.vectors[order]
        # exactly renormalized float64 rows shared by every search path, so
        # cosine and Euclidean argmins agree and distances are true cosines
        self._unit = self.vectors.astype(np.float64) / norms[order][:, None]

    @classmethod
    def from_node_embeddings(cls, scene_id: str, embeddings) -> "EmbeddingIndex":
        ids = [e.node_id for e in embeddings]
        mat = np.stack([e.vector for e in embeddings])
        return cls(scene_id, np.array(ids), mat)

    @property
    def n_nodes(self) -> int:
        return int(self.vectors.shape[0])

    def _normalize_query(self, e_q) -> np.ndarray:
        q = np.asarray(getattr(e_q, "values", e_q), dtype=np.float64).reshape(-1)
        norm = np.linalg.norm(q)
        if norm <= 1e-12:
            raise ValueError("zero-norm query embedding")
        return q / norm

    def _delta_of_row(self, row: int, q_unit: np.ndarray) -> float:
        dot = float(np.dot(self._unit[row], q_unit))
        return min(max(0.5 * (1.0 - dot), 0.0), 1.0)

    def nn_match(self, e_q) -> Tuple[int, float]:
        """Node minimizing the cosine distance; ties go to the lowest node_id."""
        q = self._normalize_query(e_q)
        dots = self._unit @ q
        row = int(np.argmax(dots))   # first occurrence = lowest node_id on ties
        return int(self.node_ids[row]), self._delta_of_row(row, q)

    def match_patches(self, patch_matrix: np.ndarray) -> MatchResult:
        """Vectorized nn_match over all patch embeddings at once."""
        return self.match_unit_patches(normalize_patch_rows(patch_matrix))

    def match_unit_patches(self, p_unit: np.ndarray) -> MatchResult:
        """As match_patches for rows already normalized (shared across scenes)."""
        dots = p_unit @ self._unit.T                        # (m, n)
        rows = np.argmax(dots, axis=1)
        # recompute each winning dot per row: the value then depends only on
        # (patch, winner), not on how the gemm blocked the other columns, so
        # adding nodes can never wiggle an unchanged winner's distance
        best = np.einsum("ij,ij->i", p_unit, self._unit[rows])
        deltas = np.clip(0.5 * (1.0 - best), 0.0, 1.0)
        return MatchResult(self.scene_id, self.node_ids[rows], deltas)

    def build_kdtree(self) -> None:
        self.tree = KdTree(self._unit, self.node_ids)

    def query_kdtree(self, e_q) -> Tuple[int, float]:
        """Exact tree-accelerated nn_match; identical answers, same tie rule."""
        if self.tree is None:
            self.build_kdtree()
        q = self._normalize_query(e_q)
        row, _d2 = self.tree.nearest(q)
        return int(self.node_ids[row]), self._delta_of_row(row, q)


def normalize_patch_rows(patch_matrix: np.ndarray) -> np.ndarray:
    """Float64 unit rows; rejects empty or zero-norm patch embeddings."""
    p = np.asarray(patch_matrix, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise ValueError("at least one patch embedding is required")
    sq = np.einsum("ij,ij->i", p, p)
    if np.any(sq <= 1e-24):
        raise ValueError("zero-norm patch embedding")
    return p / np.sqrt(sq)[:, None]


def scene_score(patch_embeddings: np.ndarray, index: EmbeddingIndex) -> SceneScore:
    """Mean over patches of (1 - distance to the nearest node), in [0, 1]."""
    match = index.match_patches(patch_embeddings)
    return SceneScore(index.scene_id, float(np.mean(1.0 - match.distances)))


@dataclass
class MapDatabase:
    """Ordered collection of per-scene embedding indexes."""

    dim: int
    indexes: List[EmbeddingIndex]

    def __post_init__(self):
        ids = [ix.scene_id for ix in self.indexes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate scene ids in the map database")
        for ix in self.indexes:
            if ix.vectors.shape[1] != self.dim:
                raise ValueError(f"scene {ix.scene_id}: dim {ix.vectors.shape[1]} != {self.dim}")
            if ix.n_nodes > KDTREE_MIN_NODES:
                ix.build_kdtree()

    def scene_ids(self) -> List[str]:
        return [ix.scene_id for ix in self.indexes]

    def index_for(self, scene_id: str) -> EmbeddingIndex:
        for ix in self.indexes:
            if ix.scene_id == scene_id:
                return ix
        raise KeyError(scene_id)

    def subset(self, scene_ids) -> "MapDatabase":
        wanted = list(scene_ids)
        return MapDatabase(self.dim, [self.index_for(sid) for sid in wanted])

    def save(self, path) -> None:
        save_embedding_db(path, self.dim,
                          [(ix.scene_id, ix.node_ids, ix.vectors) for ix in self.indexes])

    @classmethod
    def load(cls, path) -> "MapDatabase":
        dim, scenes = load_embedding_db(path)
        return cls(dim, [EmbeddingIndex(sid, ids, mat) for sid, ids, mat in scenes])


def rank_scenes(patch_embeddings: np.ndarray, db: MapDatabase, k: int) -> List[SceneScore]:
    """Scenes sorted by descending score; ties by scene_id; truncated to k."""
    if not db.indexes:
        raise ValueError("empty map database")
    if k < 1:
        raise ValueError("k must be >= 1")
    p_unit = normalize_patch_rows(patch_embeddings)   # once, shared by all scenes
    scores = []
    for ix in db.indexes:
        match = ix.match_unit_patches(p_unit)
        scores.append(SceneScore(ix.scene_id, float(np.mean(1.0 - match.distances))))
    scores.sort(key=lambda s: (-s.score, s.scene_id))
    return scores[:k]
