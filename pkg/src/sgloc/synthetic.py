"""Deterministic synthetic-world generator.

Builds seeded indoor scenes with controllable discriminative signal: every
scene draws a signature feature direction per category, node view features
and query patch features are noisy mixtures of those signatures, and knobs
decide whether geometry/attributes also carry scene identity. Temporal
variants apply node drops plus centroid jitter. Byte-identical output for a
given config is contractual.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .fusion import QuerySample
from .io import (
    KIND_PATCH_GRID,
    KIND_POINT_CLOUD,
    KIND_VIEW_LEVELS,
    FeatureContainer,
    FeatureRecord,
)
from .scenegraph import (
    CameraView,
    Edge,
    ObjectNode,
    SceneGraph,
    compute_view_refs,
    rasterize_depth,
    scene_graph_to_document,
)

PATCH_PIXELS = 8            # rendered pixels per patch cell when labeling queries
ROOM_SIZE = 6.0
ROOM_HEIGHT = 2.5


@dataclass
class SyntheticWorldConfig:
    seed: int = 0
    scene_count: int = 20
    nodes_min: int = 6
    nodes_max: int = 10
    category_vocab_size: int = 12
    attribute_vocab_size: int = 8
    relation_vocab_size: int = 6
    points_per_node: int = 96
    views_per_scene: int = 6
    drop_prob: float = 0.1
    jitter_sigma: float = 0.05
    grid_h: int = 6
    grid_w: int = 9
    feature_dim: int = 48
    levels: int = 3
    train_queries_per_scene: int = 10
    val_queries_per_scene: int = 5
    feature_noise: float = 0.10
    background_weight: float = 0.25
    label_min_coverage: float = 0.55   # dominant node's share of covered pixels
    label_min_pixels: int = 5          # absolute splat count for a label
    min_labeled_patches: int = 10
    camera_attempts: int = 40
    geometry_signal: bool = True      # per-scene shape variation for modality P
    attribute_signal: bool = True     # per-scene attribute patterns for modality A
    shared_category_set: bool = False  # every scene holds categories 0..nodes_min-1

    def __post_init__(self):
        counts = (self.scene_count, self.nodes_min, self.nodes_max, self.points_per_node,
                  self.views_per_scene, self.grid_h, self.grid_w, self.feature_dim,
                  self.category_vocab_size, self.attribute_vocab_size, self.relation_vocab_size)
        if any(c <= 0 for c in counts):
            raise ValueError("all counts must be positive")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must lie in [0, 1]")
        if not 0.0 <= self.label_min_coverage <= 1.0:
            raise ValueError("label_min_coverage must lie in [0, 1]")
        if self.nodes_min > self.nodes_max:
            raise ValueError("nodes_min must not exceed nodes_max")
        if self.nodes_max > self.category_vocab_size:
            raise ValueError(
                f"category vocabulary ({self.category_vocab_size}) is smaller than the "
                f"requested node diversity ({self.nodes_max})"
            )


@dataclass
class World:
    config: SyntheticWorldConfig
    graphs: Dict[str, SceneGraph]                 # static + temporal scans
    containers: Dict[str, FeatureContainer]
    queries: Dict[str, List[Tuple[QuerySample, str]]]  # split -> (sample, target scene)


def _look_at(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(float(np.dot(fwd, up))) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r_wc = np.stack([right, down, fwd], axis=1)
    pose = np.eye(4)
    pose[:3, :3] = r_wc.T
    pose[:3, 3] = -r_wc.T @ position
    return pose


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _nearest_pairs(centroids: np.ndarray, k: int = 2):
    d = np.linalg.norm(centroids[:, None] - centroids[None, :], axis=2)
    np.fill_diagonal(d, np.inf)
    pairs = set()
    for i in range(len(centroids)):
        for j in np.argsort(d[i], kind="stable")[:k]:
            pairs.add((min(i, int(j)), max(i, int(j))))
    return sorted(pairs)


class _CategoryTable:
    """Global per-category geometry and attribute patterns (scene-independent)."""

    def __init__(self, cfg: SyntheticWorldConfig):
        rng = np.random.default_rng(cfg.seed + 7919)
        self.extents = rng.uniform(0.25, 0.65, size=(cfg.category_vocab_size, 3))
        self.offsets = rng.uniform(-1.0, 1.0,
                                   size=(cfg.category_vocab_size, cfg.points_per_node, 3))
        self.attributes = rng.integers(0, 4, size=(cfg.category_vocab_size,
                                                   cfg.attribute_vocab_size))
        self.background = _unit(rng.standard_normal(cfg.feature_dim))


def _scene_views(cfg: SyntheticWorldConfig) -> List[CameraView]:
    center = np.array([ROOM_SIZE / 2, ROOM_SIZE / 2, 1.1])
    views = []
    for vid in range(cfg.views_per_scene):
        angle = 2 * np.pi * vid / cfg.views_per_scene
        pos = center + np.array([4.0 * np.cos(angle), 4.0 * np.sin(angle),
                                 0.3 if vid % 2 == 0 else 0.7])
        pose = _look_at(pos, center)
        views.append(CameraView(vid, pose, (80.0, 80.0, 48.0, 36.0), 96, 72))
    return views


def _build_nodes(cfg, rng, table, categories):
    margin = 0.8
    nodes = []
    for nid, cat in enumerate(categories):
        centroid = rng.uniform([margin, margin, 0.3],
                               [ROOM_SIZE - margin, ROOM_SIZE - margin, ROOM_HEIGHT - 0.7])
        if cfg.geometry_signal:
            stretch = rng.uniform(0.5, 1.5, size=3)
            offsets = rng.uniform(-1.0, 1.0, size=(cfg.points_per_node, 3))
            points = centroid + offsets * table.extents[cat] * stretch
        else:
            points = centroid + table.offsets[cat] * table.extents[cat]
        if cfg.attribute_signal:
            attributes = rng.integers(0, 4, size=cfg.attribute_vocab_size)
        else:
            attributes = table.attributes[cat].copy()
        nodes.append(ObjectNode(int(nid), int(cat), points.mean(axis=0), points,
                                attributes, np.zeros(cfg.relation_vocab_size, dtype=np.int64)))
    return nodes


def _wire_edges(cfg, rng, nodes) -> List[Edge]:
    if len(nodes) < 2:
        return []
    centroids = np.stack([n.centroid for n in nodes])
    edges = []
    for i, j in _nearest_pairs(centroids):
        rel = int(rng.integers(0, cfg.relation_vocab_size))
        edges.append(Edge(nodes[i].node_id, nodes[j].node_id, rel))
    bow = {n.node_id: np.zeros(cfg.relation_vocab_size, dtype=np.int64) for n in nodes}
    for e in edges:
        bow[e.src][e.relation_id] += 1
        bow[e.dst][e.relation_id] += 1
    for n in nodes:
        n.rel_bow = bow[n.node_id]
    return edges


def _fill_view_features(cfg, rng, graph, container, signatures):
    compute_view_refs(graph)
    graph._view_refs_done = True
    cat_of = {n.node_id: n.category_id for n in graph.nodes}
    for node in sorted(graph.nodes, key=lambda n: n.node_id):
        for view_id, count in sorted(node.view_refs):
            if count <= 0:
                continue
            levels = np.stack([
                _unit(signatures[cat_of[node.node_id]]
                      + cfg.feature_noise * rng.standard_normal(cfg.feature_dim))
                for _ in range(cfg.levels)
            ])
            container.add(FeatureRecord(KIND_VIEW_LEVELS, node.node_id, view_id,
                                        levels.astype(np.float32)))


def _query_camera(cfg, rng) -> CameraView:
    center = np.array([ROOM_SIZE / 2, ROOM_SIZE / 2, 1.1])
    angle = rng.uniform(0, 2 * np.pi)
    radius = rng.uniform(2.6, 3.6)
    pos = center + np.array([radius * np.cos(angle), radius * np.sin(angle),
                             rng.uniform(0.1, 0.6)])
    target = center + rng.uniform([-0.8, -0.8, -0.3], [0.8, 0.8, 0.3])
    width, height = cfg.grid_w * PATCH_PIXELS, cfg.grid_h * PATCH_PIXELS
    focal = 0.9 * width
    return CameraView(0, _look_at(pos, target), (focal, focal, width / 2, height / 2),
                      width, height)


def _label_grid(cfg, owner: np.ndarray, cat_of) -> Tuple[np.ndarray, np.ndarray]:
    """A patch is labeled with its dominant node when that node owns at least
    label_min_pixels splats and a clear majority of the covered pixels."""
    gh, gw = cfg.grid_h, cfg.grid_w
    gt_node = np.full((gh, gw), -1, dtype=np.int64)
    gt_cat = np.full((gh, gw), -1, dtype=np.int64)
    for gy in range(gh):
        for gx in range(gw):
            block = owner[gy * PATCH_PIXELS:(gy + 1) * PATCH_PIXELS,
                          gx * PATCH_PIXELS:(gx + 1) * PATCH_PIXELS]
            ids, counts = np.unique(block[block >= 0], return_counts=True)
            if ids.size:
                covered = int(counts.sum())
                best = int(np.argmax(counts))
                if (counts[best] >= cfg.label_min_pixels
                        and counts[best] / covered >= cfg.label_min_coverage):
                    gt_node[gy, gx] = int(ids[best])
                    gt_cat[gy, gx] = cat_of[int(ids[best])]
    return gt_node, gt_cat


def _render_query(cfg, rng, graph, signatures, image_id) -> QuerySample:
    """Pick a camera that sees enough objects, then featurize its patches.

    Cameras are redrawn (seeded) until at least min_labeled_patches cells get
    a label; after camera_attempts draws the best-so-far wins.
    """
    cat_of = {n.node_id: n.category_id for n in graph.nodes}
    best = None
    for _ in range(max(cfg.camera_attempts, 1)):
        cam = _query_camera(cfg, rng)
        owner = rasterize_depth(cam, graph.nodes)
        gt_node, gt_cat = _label_grid(cfg, owner, cat_of)
        labeled = int((gt_node >= 0).sum())
        if best is None or labeled > best[0]:
            best = (labeled, owner, gt_node, gt_cat)
        if labeled >= cfg.min_labeled_patches:
            break
    _labeled, owner, gt_node, gt_cat = best

    gh, gw, cb = cfg.grid_h, cfg.grid_w, cfg.feature_dim
    feats = np.zeros((gh, gw, cb))
    table_bg = signatures["__background__"]
    cell_px = PATCH_PIXELS * PATCH_PIXELS
    for gy in range(gh):
        for gx in range(gw):
            block = owner[gy * PATCH_PIXELS:(gy + 1) * PATCH_PIXELS,
                          gx * PATCH_PIXELS:(gx + 1) * PATCH_PIXELS]
            ids, counts = np.unique(block[block >= 0], return_counts=True)
            covered = int(counts.sum()) if ids.size else 0
            if covered:
                # node mixture weighted by ownership among covered pixels;
                # background bleeds in by its uncovered share
                mix = np.zeros(cb)
                for nid, cnt in zip(ids.tolist(), counts.tolist()):
                    mix += (cnt / covered) * signatures[cat_of[nid]]
                bg_share = cfg.background_weight * (cell_px - covered) / cell_px
                mix = (1.0 - bg_share) * mix + bg_share * table_bg
            else:
                mix = table_bg
            feats[gy, gx] = _unit(mix + cfg.feature_noise * rng.standard_normal(cb))
    return QuerySample(image_id, feats, gt_node=gt_node, gt_category=gt_cat)


def _temporal_twin(cfg, rng, graph: SceneGraph) -> SceneGraph:
    keep, dropped = [], []
    for n in sorted(graph.nodes, key=lambda n: n.node_id):
        (dropped if rng.uniform() < cfg.drop_prob else keep).append(n)
    if not keep:
        keep, dropped = dropped[:1], dropped[1:]
    nodes = []
    for n in keep:
        shift = rng.normal(0.0, cfg.jitter_sigma, size=3)
        points = n.points + shift
        nodes.append(ObjectNode(n.node_id, n.category_id, points.mean(axis=0), points,
                                n.attributes.copy(), np.zeros_like(n.rel_bow)))
    kept_ids = {n.node_id for n in nodes}
    edges = [e for e in graph.edges if e.src in kept_ids and e.dst in kept_ids]
    bow = {n.node_id: np.zeros(cfg.relation_vocab_size, dtype=np.int64) for n in nodes}
    for e in edges:
        bow[e.src][e.relation_id] += 1
        bow[e.dst][e.relation_id] += 1
    for n in nodes:
        n.rel_bow = bow[n.node_id]
    return SceneGraph(
        scene_id=f"{graph.scene_id}_t",
        place_id=graph.place_id,
        attribute_vocab=graph.attribute_vocab,
        relation_vocab=graph.relation_vocab,
        nodes=nodes,
        edges=edges,
        views=graph.views,
        temporal_of=graph.scene_id,
    )


def generate_world(cfg: SyntheticWorldConfig) -> World:
    """Pure function of the config: same seed, same world, byte for byte."""
    rng = np.random.default_rng(cfg.seed)
    table = _CategoryTable(cfg)
    attr_vocab = [f"attr_{i}" for i in range(cfg.attribute_vocab_size)]
    rel_vocab = [f"rel_{i}" for i in range(cfg.relation_vocab_size)]
    graphs: Dict[str, SceneGraph] = {}
    containers: Dict[str, FeatureContainer] = {}
    queries: Dict[str, List[Tuple[QuerySample, str]]] = {"train": [], "val": []}

    for s in range(cfg.scene_count):
        scene_id = f"scene_{s:03d}"
        if cfg.shared_category_set:
            categories = np.arange(cfg.nodes_min)
        else:
            n_nodes = int(rng.integers(cfg.nodes_min, cfg.nodes_max + 1))
            categories = rng.choice(cfg.category_vocab_size, size=n_nodes, replace=False)
        nodes = _build_nodes(cfg, rng, table, categories)
        edges = _wire_edges(cfg, rng, nodes)
        graph = SceneGraph(scene_id, f"place_{s:03d}", attr_vocab, rel_vocab,
                           nodes, edges, _scene_views(cfg))
        signatures = {int(c): _unit(rng.standard_normal(cfg.feature_dim)) for c in categories}
        signatures["__background__"] = table.background

        container = FeatureContainer(cfg.feature_dim)
        for n in nodes:
            container.add(FeatureRecord(KIND_POINT_CLOUD, n.node_id, 0,
                                        n.points.astype(np.float32)))
        _fill_view_features(cfg, rng, graph, container, signatures)

        twin = _temporal_twin(cfg, rng, graph)
        twin_container = FeatureContainer(cfg.feature_dim)
        for n in twin.nodes:
            twin_container.add(FeatureRecord(KIND_POINT_CLOUD, n.node_id, 0,
                                             n.points.astype(np.float32)))
        _fill_view_features(cfg, rng, twin, twin_container, signatures)

        graphs[scene_id] = graph
        containers[scene_id] = container
        graphs[twin.scene_id] = twin
        containers[twin.scene_id] = twin_container

        total_q = cfg.train_queries_per_scene + cfg.val_queries_per_scene
        for qi in range(total_q):
            sample = _render_query(cfg, rng, graph, signatures, image_id=s * 1000 + qi)
            split = "train" if qi < cfg.train_queries_per_scene else "val"
            queries[split].append((sample, scene_id))

    return World(cfg, graphs, containers, queries)


# ---------------------------------------------------------------------------
# on-disk layout


def write_dataset(world: World, root) -> None:
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    (root / "features").mkdir(exist_ok=True)
    for split in world.queries:
        (root / "queries" / split).mkdir(parents=True, exist_ok=True)

    manifest = {
        "config": asdict(world.config),
        "scenes": sorted(world.graphs),
        "splits": {split: [int(s.image_id) for s, _ in items]
                   for split, items in world.queries.items()},
    }
    (root / "world.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    for scene_id in sorted(world.graphs):
        doc = scene_graph_to_document(world.graphs[scene_id])
        (root / "scenes" / f"{scene_id}.json").write_text(
            json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        world.containers[scene_id].save(root / "features" / f"{scene_id}.sglf")
    for split, items in world.queries.items():
        for sample, target in items:
            meta = {
                "image_id": int(sample.image_id),
                "scene_id": target,
                "grid_h": sample.grid_h,
                "grid_w": sample.grid_w,
                "features_ref": f"{sample.image_id}.sglf",
                "gt_node": sample.flat_gt_node().reshape(sample.grid_h, sample.grid_w).tolist(),
                "gt_category": sample.flat_gt_category().reshape(sample.grid_h, sample.grid_w).tolist(),
            }
            base = root / "queries" / split
            (base / f"{sample.image_id}.json").write_text(
                json.dumps(meta, indent=2) + "\n", encoding="utf-8")
            qc = FeatureContainer(world.config.feature_dim)
            qc.add(FeatureRecord(KIND_PATCH_GRID, int(sample.image_id), 0,
                                 sample.patch_features.astype(np.float32)))
            qc.save(base / f"{sample.image_id}.sglf")
