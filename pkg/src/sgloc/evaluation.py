"""Evaluation and diagnostics: Recall@K, patch accuracy, entropy, Pearson
correlation, confusion matrices, storage and timing reports, and the
candidate-set retrieval harness."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .fusion import QuerySample, embed_query
from .io import load_embedding_db, embedding_db_expected_bytes
from .retrieval import MapDatabase, rank_scenes


@dataclass
class EvalRecord:
    """Outcome of ranking one query against its candidate set."""

    image_id: int
    target_scene_id: str
    candidate_ids: List[str]
    rank: int                       # 1-based position of the target
    gt_categories: np.ndarray       # labeled patches only
    matched_categories: np.ndarray  # category of the node matched in the target scene
    patch_correct: np.ndarray       # bool per labeled patch

    def __post_init__(self):
        if self.target_scene_id not in self.candidate_ids:
            raise ValueError("target must be among the candidates")
        if self.rank < 1:
            raise ValueError("rank is 1-based")


def recall_at_k(records: Sequence[EvalRecord], k: int) -> float:
    """Fraction of queries whose target lands in the top k."""
    if not records:
        raise ValueError("no evaluation records")
    return float(np.mean([r.rank <= k for r in records]))


def patch_accuracy(records: Sequence[EvalRecord]) -> float:
    """Correct patch-to-node assignments over labeled patches only."""
    correct = sum(int(r.patch_correct.sum()) for r in records)
    labeled = sum(int(r.patch_correct.size) for r in records)
    if labeled == 0:
        raise ValueError("no labeled patches in the records")
    return correct / labeled


def shannon_entropy(sample: QuerySample) -> float:
    """Entropy (natural log) of the node-observation frequencies in a sample."""
    gt = sample.flat_gt_node()
    labeled = gt[gt >= 0]
    if labeled.size == 0:
        raise ValueError("entropy of a sample with no labeled patches is undefined")
    _, counts = np.unique(labeled, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation; rejects constant sequences."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("need two equal-length sequences of at least 2 values")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt((xc * xc).sum()))
    sy = float(np.sqrt((yc * yc).sum()))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation of a constant sequence is undefined")
    r = float((xc * yc).sum() / (sx * sy))
    return min(max(r, -1.0), 1.0)


def confusion_matrix(records: Sequence[EvalRecord], n_categories: int) -> np.ndarray:
    """Counts[gt category, matched category] over labeled patches."""
    mat = np.zeros((n_categories, n_categories), dtype=np.int64)
    for r in records:
        for g, m in zip(r.gt_categories, r.matched_categories):
            mat[int(g), int(m)] += 1
    return mat


# ---------------------------------------------------------------------------
# storage and timing


@dataclass
class StorageReport:
    path: str
    total_bytes: int
    payload_bytes: int              # scenes * nodes * D * 4
    per_scene: List[Tuple[str, int, int]]  # (scene_id, nodes, bytes)

    @property
    def overhead_ratio(self) -> float:
        return self.total_bytes / max(self.payload_bytes, 1)


def storage_report(db_path) -> StorageReport:
    db_path = Path(db_path)
    total = db_path.stat().st_size
    dim, scenes = load_embedding_db(db_path)
    per_scene = []
    payload = 0
    for scene_id, node_ids, _mat in scenes:
        n = len(node_ids)
        per_scene.append((scene_id, n,
                          embedding_db_expected_bytes([(scene_id, n, dim)]) - 16))
        payload += n * dim * 4
    return StorageReport(str(db_path), total, payload, per_scene)


@dataclass
class TimingReport:
    repeats: int
    embed_ms_median: float
    embed_ms_var: float
    retrieve_ms_median: float
    retrieve_ms_var: float


def timing_report(samples: Sequence[QuerySample], db: MapDatabase, params, cfg,
                  repeats: int = 30) -> TimingReport:
    """Median per-stage wall time over >= `repeats` runs on a monotonic clock."""
    if repeats < 1:
        raise ValueError("repeats must be positive")
    sample = samples[0]
    embed_times, retrieve_times = [], []
    patches = embed_query(sample, params, cfg)       # warm
    for _ in range(repeats):
        t0 = time.perf_counter()
        patches = embed_query(sample, params, cfg)
        t1 = time.perf_counter()
        rank_scenes(patches, db, k=len(db.indexes))
        t2 = time.perf_counter()
        embed_times.append((t1 - t0) * 1e3)
        retrieve_times.append((t2 - t1) * 1e3)
    return TimingReport(
        repeats=repeats,
        embed_ms_median=float(np.median(embed_times)),
        embed_ms_var=float(np.var(embed_times)),
        retrieve_ms_median=float(np.median(retrieve_times)),
        retrieve_ms_var=float(np.var(retrieve_times)),
    )


# ---------------------------------------------------------------------------
# candidate-set retrieval harness


def candidate_sets(target_ids: Sequence[str], all_scene_ids: Sequence[str],
                   candidate_size: int, seed: int) -> List[List[str]]:
    """Seeded wrong-scene samples plus the target, one set per query."""
    rng = np.random.default_rng(seed)
    pool = sorted(all_scene_ids)
    sets = []
    for target in target_ids:
        others = [sid for sid in pool if sid != target]
        take = min(max(candidate_size - 1, 0), len(others))
        picked = sorted(rng.choice(len(others), size=take, replace=False).tolist())
        sets.append(sorted([target] + [others[i] for i in picked]))
    return sets


def evaluate_queries(queries: Sequence[Tuple[QuerySample, str]], db: MapDatabase,
                     params, cfg, candidate_size: int, seed: int,
                     target_map: Dict[str, str] = None,
                     category_maps: Dict[str, Dict[int, int]] = None) -> List[EvalRecord]:
    """Rank every query inside its seeded candidate set and match its patches.

    target_map optionally redirects each query's target scene to another scan
    of the same place (the temporal protocol; labels stay in node-id space).
    category_maps gives scene_id -> node_id -> category_id so the confusion
    matrix can name what each patch actually matched.
    """
    target_map = target_map or {}
    category_maps = category_maps or {}
    targets = [target_map.get(t, t) for _s, t in queries]
    sets = candidate_sets(targets, db.scene_ids(), candidate_size, seed)
    records = []
    for (sample, _orig), target, cand in zip(queries, targets, sets):
        patches = embed_query(sample, params, cfg)
        sub = db.subset(cand)
        ranked = rank_scenes(patches, sub, k=len(cand))
        rank = next(i for i, s in enumerate(ranked, start=1) if s.scene_id == target)

        match = db.index_for(target).match_patches(patches)
        gt_nodes = sample.flat_gt_node()
        gt_cats = sample.flat_gt_category()
        labeled = gt_nodes >= 0
        cat_of = category_maps.get(target, {})
        matched_cats = np.array([cat_of.get(int(n), -1) for n in match.node_ids[labeled]],
                                dtype=np.int64)
        records.append(EvalRecord(
            image_id=sample.image_id,
            target_scene_id=target,
            candidate_ids=cand,
            rank=rank,
            gt_categories=gt_cats[labeled],
            matched_categories=matched_cats,
            patch_correct=(match.node_ids[labeled] == gt_nodes[labeled]),
        ))
    return records
