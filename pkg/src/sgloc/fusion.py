"""Joint node embedding and the query-image patch embedding pipeline.

Both sides produce comparable unit vectors of the shared joint dimension.
Absent modalities degrade gracefully: their concat slot is zero-filled and
they are excluded from the modality softmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import (
    ModelConfig,
    ViewFeature,
    encode_bow,
    encode_image_view_sets,
    encode_point_clouds,
    encode_structure,
)
from .io import KIND_VIEW_LEVELS
from .metric import MODALITY_KEYS
from .scenegraph import SceneGraph, compute_view_refs, select_top_views


@dataclass
class NodeEmbedding:
    """Stored joint embedding of one graph node (unit-normalized float32)."""

    node_id: int
    scene_id: str
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if self.vector.ndim != 1:
            raise ValueError("node embedding must be a vector")
        norm = float(np.linalg.norm(self.vector.astype(np.float64)))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"stored node embedding must be unit norm, got {norm:.9g}")


@dataclass
class QuerySample:
    """Patch-feature grid of one query image plus optional ground-truth labels."""

    image_id: int
    patch_features: np.ndarray            # (grid_h, grid_w, C_b)
    gt_node: Optional[np.ndarray] = None      # (grid_h, grid_w), -1 = unlabeled
    gt_category: Optional[np.ndarray] = None  # (grid_h, grid_w), -1 = unlabeled

    def __post_init__(self):
        self.patch_features = np.asarray(self.patch_features, dtype=np.float64)
        if self.patch_features.ndim != 3 or min(self.patch_features.shape[:2]) < 1:
            raise ValueError("patch_features must be a non-degenerate (H, W, C) grid")
        if not np.all(np.isfinite(self.patch_features)):
            raise ValueError("non-finite patch features")
        for name in ("gt_node", "gt_category"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.int64)
                if arr.shape != self.patch_features.shape[:2]:
                    raise ValueError(f"{name} shape {arr.shape} does not match the grid")
                setattr(self, name, arr)

    @property
    def grid_h(self) -> int:
        return self.patch_features.shape[0]

    @property
    def grid_w(self) -> int:
        return self.patch_features.shape[1]

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    def flat_gt_node(self) -> np.ndarray:
        if self.gt_node is None:
            return np.full(self.n_patches, -1, dtype=np.int64)
        return self.gt_node.reshape(-1)

    def flat_gt_category(self) -> np.ndarray:
        if self.gt_category is None:
            return np.full(self.n_patches, -1, dtype=np.int64)
        return self.gt_category.reshape(-1)


# ---------------------------------------------------------------------------
# modality fusion


def fuse_modalities(unimodal: Dict[str, Tensor], logits: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Weighted concat of the present unimodal embeddings, then a two-layer MLP.

    unimodal maps modality key -> (B, dim_k) tensor. Each present vector is
    L2-normalized, scaled by a softmax over the present logits only, placed in
    its fixed slot (absent slots zero-filled), and the MLP output is
    re-normalized.
    """
    unknown = set(unimodal) - set(MODALITY_KEYS)
    if unknown:
        raise ValueError(f"unknown modality keys: {sorted(unknown)}")
    present = [k for k in MODALITY_KEYS if k in unimodal]
    if not present:
        raise ValueError("at least one modality must be present")
    batch = None
    for key in present:
        t = unimodal[key]
        want = cfg.modality_dims[key]
        if t.data.ndim != 2 or t.data.shape[1] != want:
            raise ValueError(f"modality {key}: expected (B, {want}), got {t.data.shape}")
        if batch is None:
            batch = t.data.shape[0]
        elif t.data.shape[0] != batch:
            raise ValueError("modality batches disagree")

    idx = [MODALITY_KEYS.index(k) for k in present]
    weights = ad.softmax(ad.take_rows(ad.reshape(logits, (len(MODALITY_KEYS), 1)), idx), axis=0)

    slots = []
    for slot, key in enumerate(MODALITY_KEYS):
        if key in unimodal:
            w_k = ad.take_rows(weights, [present.index(key)])        # (1, 1)
            slots.append(ad.mul(ad.l2_normalize_rows(unimodal[key]), w_k))
        else:
            slots.append(ad.Tensor(np.zeros((batch, cfg.modality_dims[key]))))
    x = ad.concat(slots, axis=1)
    h = ad.relu(ad.add(ad.matmul(x, params["fuse/l1_w"]), params["fuse/l1_b"]))
    out = ad.add(ad.matmul(h, params["fuse/l2_w"]), params["fuse/l2_b"])
    return ad.l2_normalize_rows(out)


# ---------------------------------------------------------------------------
# patch encoder


def encode_patch_grids(features: np.ndarray, params, cfg: ModelConfig) -> Tensor:
    """Residual conv stack plus per-patch MLP over (B, H, W, C_b) feature grids.

    Returns a (B*H*W, joint_dim) tensor of unit rows, sample-major.
    """
    x = features if isinstance(features, Tensor) else ad.Tensor(np.asarray(features, dtype=np.float64))
    if x.data.ndim != 4:
        raise ValueError("expected (B, H, W, C) features")
    if not np.all(np.isfinite(x.data)):
        raise ValueError("non-finite patch features")
    b, h, w, _ = x.data.shape
    ch = cfg.patch_channels
    stem = ad.add(ad.matmul(ad.reshape(x, (b * h * w, cfg.feature_dim)), params["patch/stem_w"]),
                  params["patch/stem_b"])
    y = ad.reshape(stem, (b, h, w, ch))
    for block in range(cfg.patch_blocks):
        conv = ad.conv2d_3x3(y, params[f"patch/block{block}/conv_w"], params[f"patch/block{block}/conv_b"])
        y = ad.add(y, ad.relu(conv))
    y = ad.reshape(y, (b * h * w, ch))
    y = ad.relu(ad.add(ad.matmul(y, params["patch/mlp1_w"]), params["patch/mlp1_b"]))
    y = ad.relu(ad.add(ad.matmul(y, params["patch/mlp2_w"]), params["patch/mlp2_b"]))
    y = ad.add(ad.matmul(y, params["patch/mlp3_w"]), params["patch/mlp3_b"])
    return ad.l2_normalize_rows(y)


def encode_patches(sample: QuerySample, params, cfg: ModelConfig) -> Tensor:
    """One embedding per patch of a single sample, row-major over the grid."""
    return encode_patch_grids(sample.patch_features[None], params, cfg)


def embed_query(sample: QuerySample, params, cfg: ModelConfig) -> np.ndarray:
    """Inference wrapper: float32 (n_patches, joint_dim) patch embeddings."""
    return encode_patches(sample, params, cfg).data.astype(np.float32)


# ---------------------------------------------------------------------------
# whole-scene embedding


def node_view_features(graph: SceneGraph, container, node, cfg: ModelConfig) -> List[ViewFeature]:
    """Assemble the top-K view features of a node from the feature container."""
    view_by_id = {v.view_id: v for v in graph.views}
    selected = select_top_views(node, graph.views, cfg.k_view)
    feats = []
    for view_id, _count in selected:
        if not container.has(KIND_VIEW_LEVELS, node.node_id, view_id):
            raise KeyError(
                f"scene {graph.scene_id}: node {node.node_id} lacks view features for view {view_id}"
            )
        levels = container.view_levels(node.node_id, view_id)
        feats.append(ViewFeature(view_id, view_by_id[view_id].pose, levels))
    return feats


def embed_scene_tensors(graph: SceneGraph, container, params, cfg: ModelConfig, modalities):
    """Joint embeddings for every node of one graph, differentiably.

    Returns (sorted node ids, Tensor (n, joint_dim)). Nodes missing a payload
    for an enabled modality raise; nodes with zero visible views simply drop
    the image modality (graceful degradation).
    """
    modalities = list(modalities)
    unknown = set(modalities) - set(MODALITY_KEYS)
    if unknown:
        raise ValueError(f"unknown modality keys: {sorted(unknown)}")
    if not modalities:
        raise ValueError("at least one modality must be enabled")
    nodes = sorted(graph.nodes, key=lambda n: n.node_id)
    node_ids = [n.node_id for n in nodes]
    per_modality: Dict[str, Tensor] = {}

    if "P" in modalities:
        for n in nodes:
            if n.points.shape[0] < 1:
                raise ValueError(f"node {n.node_id} has no point cloud payload")
        per_modality["P"] = encode_point_clouds([n.points for n in nodes], params, cfg)
    if "S" in modalities:
        _, per_modality["S"] = encode_structure(graph, params, cfg)
    if "R" in modalities:
        per_modality["R"] = encode_bow(np.stack([n.rel_bow for n in nodes]), params, cfg, "rel")
    if "A" in modalities:
        per_modality["A"] = encode_bow(np.stack([n.attributes for n in nodes]), params, cfg, "attr")

    image_rows: Dict[int, int] = {}
    if "I" in modalities and graph.views:
        if not getattr(graph, "_view_refs_done", False):
            compute_view_refs(graph)
            graph._view_refs_done = True
        view_sets, owners = [], []
        for row, n in enumerate(nodes):
            feats = node_view_features(graph, container, n, cfg)
            if feats:
                owners.append(row)
                view_sets.append(feats)
        if view_sets:
            per_modality["I"] = encode_image_view_sets(view_sets, params, cfg)
            image_rows = {row: k for k, row in enumerate(owners)}

    # fuse per present-modality signature so rows batch together
    signatures: Dict[tuple, List[int]] = {}
    for row in range(len(nodes)):
        sig = tuple(k for k in MODALITY_KEYS
                    if k in per_modality and (k != "I" or row in image_rows))
        if not sig:
            raise ValueError(f"node {node_ids[row]} has no usable modality payload")
        signatures.setdefault(sig, []).append(row)

    outs, orders = [], []
    for sig, rows in sorted(signatures.items()):
        unimodal = {}
        for key in sig:
            if key == "I":
                unimodal[key] = ad.take_rows(per_modality["I"], [image_rows[r] for r in rows])
            else:
                unimodal[key] = ad.take_rows(per_modality[key], rows)
        outs.append(fuse_modalities(unimodal, params["fuse/logits"], params, cfg))
        orders.append(rows)
    stacked = ad.concat(outs, axis=0)
    flat = [r for rows in orders for r in rows]
    joint = ad.take_rows(stacked, np.argsort(np.array(flat)))
    return node_ids, joint


def embed_scene(graph: SceneGraph, container, params, cfg: ModelConfig, modalities) -> List[NodeEmbedding]:
    """Inference wrapper: stored float32 embeddings, ordered by node_id."""
    node_ids, joint = embed_scene_tensors(graph, container, params, cfg, modalities)
    mat = joint.data.astype(np.float32)
    return [NodeEmbedding(nid, graph.scene_id, row) for nid, row in zip(node_ids, mat)]
