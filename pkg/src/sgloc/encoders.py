"""Unimodal node encoders and their parameter registry.

Five per-node channels feed the joint embedding: point cloud (P), multi-view
image features (I), structure (S), relationship counts (R), attribute counts
(A). Every forward pass is built on the autodiff engine in float64; encoders
are pure functions of (inputs, params) and safe to evaluate concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Dict, List

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LEAKY_SLOPE = 0.2


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults follow the production sizing;
    every width is adjustable so miniature models stay finite-difference
    checkable."""

    feature_dim: int = 384          # backbone channel count C_b
    point_dim: int = 100
    image_dim: int = 256
    struct_dim: int = 100
    bow_dim: int = 100
    joint_dim: int = 400
    point_hidden: tuple = (64, 128)
    bow_hidden: int = 128
    attn_heads: int = 4
    attn_layers: int = 2
    ff_dim: int = 512
    fusion_hidden: int = 512
    patch_channels: int = 256
    patch_blocks: int = 4
    patch_hidden: int = 512
    levels: int = 3                 # crop levels L per view
    k_view: int = 10                # views fused per node
    attr_vocab_size: int = 8
    rel_vocab_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.image_dim % self.attn_heads != 0:
            raise ValueError("image_dim must be divisible by attn_heads")

    @property
    def modality_dims(self) -> Dict[str, int]:
        return {
            "P": self.point_dim,
            "I": self.image_dim,
            "S": self.struct_dim,
            "R": self.bow_dim,
            "A": self.bow_dim,
        }

    @property
    def concat_dim(self) -> int:
        return sum(self.modality_dims.values())

    def to_meta(self) -> dict:
        meta = asdict(self)
        meta["point_hidden"] = list(self.point_hidden)
        return meta

    @classmethod
    def from_meta(cls, meta: dict) -> "ModelConfig":
        meta = dict(meta)
        meta["point_hidden"] = tuple(meta["point_hidden"])
        return cls(**meta)


@dataclass
class ViewFeature:
    """One selected view of a node: its pose plus L crop-level features."""

    view_id: int
    pose: np.ndarray                # 4x4 camera-from-world
    level_features: np.ndarray      # (L, C_b)

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        self.level_features = np.asarray(self.level_features, dtype=np.float64)
        if self.level_features.ndim != 2:
            raise ValueError("level_features must be (L, C_b)")
        if not np.all(np.isfinite(self.level_features)):
            raise ValueError("non-finite view features")

    def pose_vector(self) -> np.ndarray:
        """Flattened [R | t], normalized to unit length.

        Translations are meters and can dwarf the rotation entries; without
        the normalization the pose term dominates the view tokens and drowns
        the (scene-discriminative) crop features.
        """
        raw = np.concatenate([self.pose[:3, :3].reshape(-1), self.pose[:3, 3]])
        return raw / np.linalg.norm(raw)


def aggregate_crop_levels(level_features) -> np.ndarray:
    """Arithmetic mean over the L crop-level feature vectors."""
    arr = np.asarray(level_features, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError("expected a non-empty (L, C) feature stack")
    return arr.mean(axis=0)


# ---------------------------------------------------------------------------
# parameter registry


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    """Weight init, uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)).

    The gain matters: with the smaller 1/sqrt(fan_in) bound the ReLU trunks
    lose nearly all cross-sample angular spread by their last layer, the
    normalized embeddings start collapsed, and the contrastive gradients
    (tangential on the sphere) vanish with the spread. Variance-preserving
    gain keeps the embedding cloud wide enough to train at desk scale.
    """
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _bias_uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _linear_params(params, rng, name, fan_in, fan_out):
    params[f"{name}_w"] = ad.parameter(_uniform(rng, fan_in, (fan_in, fan_out)), f"{name}_w")
    params[f"{name}_b"] = ad.parameter(_bias_uniform(rng, fan_in, (fan_out,)), f"{name}_b")


def init_model(cfg: ModelConfig) -> Dict[str, Tensor]:
    """Seeded parameter registry for all encoders, fusion, and the patch net.

    Creation order is fixed, so a given seed always yields the same weights.
    """
    rng = np.random.default_rng(cfg.seed)
    params: Dict[str, Tensor] = {}

    h1, h2 = cfg.point_hidden
    _linear_params(params, rng, "point/l1", 3, h1)
    _linear_params(params, rng, "point/l2", h1, h2)
    _linear_params(params, rng, "point/l3", h2, cfg.point_dim)

    _linear_params(params, rng, "attr/l1", cfg.attr_vocab_size, cfg.bow_hidden)
    _linear_params(params, rng, "attr/l2", cfg.bow_hidden, cfg.bow_dim)
    _linear_params(params, rng, "rel/l1", cfg.rel_vocab_size, cfg.bow_hidden)
    _linear_params(params, rng, "rel/l2", cfg.bow_hidden, cfg.bow_dim)

    _linear_params(params, rng, "struct/lift", 3, cfg.struct_dim)
    for layer in range(2):
        base = f"struct/gat{layer}"
        params[f"{base}/diag"] = ad.parameter(
            1.0 + _bias_uniform(rng, cfg.struct_dim, (cfg.struct_dim,)), f"{base}/diag")
        params[f"{base}/att_src"] = ad.parameter(_uniform(rng, cfg.struct_dim, (cfg.struct_dim, 1)), f"{base}/att_src")
        params[f"{base}/att_dst"] = ad.parameter(_uniform(rng, cfg.struct_dim, (cfg.struct_dim, 1)), f"{base}/att_dst")

    dm = cfg.image_dim
    _linear_params(params, rng, "view/feat", cfg.feature_dim, dm)
    _linear_params(params, rng, "view/pose", 12, dm)
    for layer in range(cfg.attn_layers):
        base = f"view/layer{layer}"
        for proj in ("wq", "wk", "wv", "wo"):
            _linear_params(params, rng, f"{base}/{proj}", dm, dm)
        params[f"{base}/ln1_g"] = ad.parameter(np.ones(dm), f"{base}/ln1_g")
        params[f"{base}/ln1_b"] = ad.parameter(np.zeros(dm), f"{base}/ln1_b")
        _linear_params(params, rng, f"{base}/ff1", dm, cfg.ff_dim)
        _linear_params(params, rng, f"{base}/ff2", cfg.ff_dim, dm)
        params[f"{base}/ln2_g"] = ad.parameter(np.ones(dm), f"{base}/ln2_g")
        params[f"{base}/ln2_b"] = ad.parameter(np.zeros(dm), f"{base}/ln2_b")

    params["fuse/logits"] = ad.parameter(np.zeros(len(cfg.modality_dims)), "fuse/logits")
    _linear_params(params, rng, "fuse/l1", cfg.concat_dim, cfg.fusion_hidden)
    _linear_params(params, rng, "fuse/l2", cfg.fusion_hidden, cfg.joint_dim)

    ch = cfg.patch_channels
    _linear_params(params, rng, "patch/stem", cfg.feature_dim, ch)
    for block in range(cfg.patch_blocks):
        params[f"patch/block{block}/conv_w"] = ad.parameter(
            _uniform(rng, 9 * ch, (3, 3, ch, ch)), f"patch/block{block}/conv_w"
        )
        params[f"patch/block{block}/conv_b"] = ad.parameter(
            _bias_uniform(rng, 9 * ch, (ch,)), f"patch/block{block}/conv_b"
        )
    _linear_params(params, rng, "patch/mlp1", ch, cfg.patch_hidden)
    _linear_params(params, rng, "patch/mlp2", cfg.patch_hidden, cfg.patch_hidden)
    _linear_params(params, rng, "patch/mlp3", cfg.patch_hidden, cfg.joint_dim)
    _center_embedding_heads(params, cfg)
    return params


def _center_embedding_heads(params, cfg: ModelConfig) -> None:
    """Initialize the final bias of each joint-embedding head so the head's
    zero-input response is the zero vector.

    Without this, both heads emit (bias-driven) constant vectors plus small
    deviations; after normalization the patch cloud and the node cloud start
    as two tight clusters, the contrastive loss first merges them, and the
    merged cloud contracts into a collapse where the spherical gradients
    vanish. Cancelling the constant responses keeps the clouds wide from the
    first step. Only the initial values change; the forward passes and the
    optimizer treat these biases like any other parameter.
    """
    hidden = np.maximum(params["fuse/l1_b"].data, 0.0)
    params["fuse/l2_b"].data = -(hidden @ params["fuse/l2_w"].data)

    y = params["patch/stem_b"].data.copy()     # interior response to zero features
    for block in range(cfg.patch_blocks):
        taps = params[f"patch/block{block}/conv_w"].data.sum(axis=(0, 1))
        y = y + np.maximum(y @ taps + params[f"patch/block{block}/conv_b"].data, 0.0)
    h = np.maximum(y @ params["patch/mlp1_w"].data + params["patch/mlp1_b"].data, 0.0)
    h = np.maximum(h @ params["patch/mlp2_w"].data + params["patch/mlp2_b"].data, 0.0)
    params["patch/mlp3_b"].data = -(h @ params["patch/mlp3_w"].data)


def params_to_arrays(params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.items()}


def params_from_arrays(arrays: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    return {name: ad.parameter(arr) for name, arr in arrays.items()}


def zero_gradients(params: Dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None


def _affine(x: Tensor, params, name: str) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{name}_w"]), params[f"{name}_b"])


def _group_indices(sizes: List[int]) -> Dict[int, List[int]]:
    groups: Dict[int, List[int]] = {}
    for i, s in enumerate(sizes):
        groups.setdefault(s, []).append(i)
    return groups


def _stitch(groups_out: List[Tensor], index_lists: List[List[int]]) -> Tensor:
    """Reassemble grouped batch outputs back into the original row order."""
    stacked = ad.concat(groups_out, axis=0)
    flat_order = [i for idx in index_lists for i in idx]
    inverse = np.argsort(np.array(flat_order))
    return ad.take_rows(stacked, inverse)


# ---------------------------------------------------------------------------
# point cloud encoder


def normalize_cloud(points: np.ndarray) -> np.ndarray:
    """Center the cloud and scale it into the unit sphere.

    The center is the bounding-box midpoint, not the sample mean: it is
    unchanged by duplicating points, which keeps the encoder exactly
    invariant under duplication as well as permutation.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ValueError("point cloud must be a non-empty Nx3 matrix")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite values")
    center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    centered = pts - center
    radius = float(np.linalg.norm(centered, axis=1).max())
    if radius > 1e-12:
        centered = centered / radius
    return centered


def encode_point_clouds(clouds: List[np.ndarray], params, cfg: ModelConfig) -> Tensor:
    """Shared per-point MLP with coordinate-wise max pooling, one row per cloud."""
    normed = [normalize_cloud(c) for c in clouds]
    groups = _group_indices([c.shape[0] for c in normed])
    outs, orders = [], []
    for n_pts, idx in sorted(groups.items()):
        x = ad.Tensor(np.stack([normed[i] for i in idx]))      # (B, N, 3)
        b = len(idx)
        h = ad.reshape(x, (b * n_pts, 3))
        h = ad.relu(_affine(h, params, "point/l1"))
        h = ad.relu(_affine(h, params, "point/l2"))
        h = _affine(h, params, "point/l3")
        h = ad.reshape(h, (b, n_pts, cfg.point_dim))
        outs.append(ad.tmax(h, axis=1))
        orders.append(idx)
    return _stitch(outs, orders)


def encode_point_cloud(points: np.ndarray, params, cfg: ModelConfig) -> Tensor:
    return ad.reshape(encode_point_clouds([points], params, cfg), (cfg.point_dim,))


# ---------------------------------------------------------------------------
# bag-of-words meta encoders


def encode_bow(counts: np.ndarray, params, cfg: ModelConfig, which: str) -> Tensor:
    """Two-layer feed-forward net over raw count vectors; which in {attr, rel}."""
    if which not in ("attr", "rel"):
        raise ValueError(f"unknown bow encoder '{which}'")
    x = np.atleast_2d(np.asarray(counts, dtype=np.float64))
    expected = cfg.attr_vocab_size if which == "attr" else cfg.rel_vocab_size
    if x.shape[1] != expected:
        raise ValueError(f"{which} counts have length {x.shape[1]}, expected {expected}")
    if np.any(x < 0):
        raise ValueError("count vectors must be nonnegative")
    h = ad.relu(_affine(ad.Tensor(x), params, f"{which}/l1"))
    return _affine(h, params, f"{which}/l2")


# ---------------------------------------------------------------------------
# structure encoder (two graph-attention layers, diagonal weights)


def _gat_layer(h: Tensor, mask: np.ndarray, params, base: str) -> Tensor:
    hd = ad.mul(h, params[f"{base}/diag"])                    # diagonal weight
    s = ad.matmul(hd, params[f"{base}/att_src"])              # (n, 1)
    t = ad.matmul(hd, params[f"{base}/att_dst"])              # (n, 1)
    logits = ad.leaky_relu(ad.add(s, ad.transpose(t)), LEAKY_SLOPE)
    attn = ad.masked_softmax(logits, mask, axis=1)
    return ad.matmul(attn, hd)


def structure_input_features(graph) -> np.ndarray:
    """Per-node input: centroid relative to the scene centroid."""
    nodes = sorted(graph.nodes, key=lambda n: n.node_id)
    centroids = np.stack([n.centroid for n in nodes])
    return centroids - centroids.mean(axis=0)


def neighborhood_mask(graph) -> np.ndarray:
    """Symmetric adjacency with self-loops over the sorted node order."""
    nodes = sorted(graph.nodes, key=lambda n: n.node_id)
    index = {n.node_id: i for i, n in enumerate(nodes)}
    n = len(nodes)
    mask = np.eye(n)
    for e in graph.edges:
        i, j = index[e.src], index[e.dst]
        mask[i, j] = 1.0
        mask[j, i] = 1.0
    return mask


def encode_structure(graph, params, cfg: ModelConfig):
    """Returns (sorted node ids, Tensor (n, struct_dim)) for one graph."""
    if not graph.nodes:
        raise ValueError("cannot encode an empty graph")
    feats = structure_input_features(graph)
    mask = neighborhood_mask(graph)
    h = _affine(ad.Tensor(feats), params, "struct/lift")
    h = ad.relu(_gat_layer(h, mask, params, "struct/gat0"))
    h = _gat_layer(h, mask, params, "struct/gat1")
    return [n.node_id for n in sorted(graph.nodes, key=lambda n: n.node_id)], h


# ---------------------------------------------------------------------------
# multi-view image encoder


def _attention_block(x: Tensor, b: int, t: int, params, cfg: ModelConfig, base: str) -> Tensor:
    """Pre-norm transformer block: the residual stream carries the raw token
    content, so max pooling over tokens keeps cross-node spread."""
    dm = cfg.image_dim
    heads = cfg.attn_heads
    dh = dm // heads

    def split_heads(y: Tensor) -> Tensor:
        y = ad.reshape(y, (b, t, heads, dh))
        return ad.reshape(ad.transpose(y, (0, 2, 1, 3)), (b * heads, t, dh))

    flat = ad.reshape(x, (b * t, dm))
    normed = ad.layer_norm(flat, params[f"{base}/ln1_g"], params[f"{base}/ln1_b"])
    q = split_heads(_affine(normed, params, f"{base}/wq"))
    k = split_heads(_affine(normed, params, f"{base}/wk"))
    v = split_heads(_affine(normed, params, f"{base}/wv"))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    ctx = ad.matmul(ad.softmax(scores, axis=-1), v)            # (b*heads, t, dh)
    ctx = ad.transpose(ad.reshape(ctx, (b, heads, t, dh)), (0, 2, 1, 3))
    attn = _affine(ad.reshape(ctx, (b * t, dm)), params, f"{base}/wo")

    x = ad.add(flat, attn)
    normed2 = ad.layer_norm(x, params[f"{base}/ln2_g"], params[f"{base}/ln2_b"])
    ff = _affine(ad.relu(_affine(normed2, params, f"{base}/ff1")), params, f"{base}/ff2")
    x = ad.add(x, ff)
    return ad.reshape(x, (b, t, dm))


def _encode_view_group(view_sets: List[List[ViewFeature]], params, cfg: ModelConfig) -> Tensor:
    b, t = len(view_sets), len(view_sets[0])
    feats = np.stack([[aggregate_crop_levels(vf.level_features) for vf in vs] for vs in view_sets])
    poses = np.stack([[vf.pose_vector() for vf in vs] for vs in view_sets])
    tok = ad.add(
        _affine(ad.Tensor(feats.reshape(b * t, -1)), params, "view/feat"),
        _affine(ad.Tensor(poses.reshape(b * t, 12)), params, "view/pose"),
    )
    x = ad.reshape(tok, (b, t, cfg.image_dim))
    for layer in range(cfg.attn_layers):
        x = _attention_block(x, b, t, params, cfg, f"view/layer{layer}")
    return ad.tmax(x, axis=1)                                  # (b, image_dim)


def encode_image_view_sets(view_sets: List[List[ViewFeature]], params, cfg: ModelConfig) -> Tensor:
    """Pose-conditioned transformer over each node's view tokens, max-pooled.

    No index positional encoding is used anywhere, so the output is invariant
    to the order of the views within a set.
    """
    if any(len(vs) == 0 for vs in view_sets):
        raise ValueError("every view set must contain at least one view")
    groups = _group_indices([len(vs) for vs in view_sets])
    outs, orders = [], []
    for _, idx in sorted(groups.items()):
        outs.append(_encode_view_group([view_sets[i] for i in idx], params, cfg))
        orders.append(idx)
    return _stitch(outs, orders)


def encode_image_views(view_features: List[ViewFeature], params, cfg: ModelConfig) -> Tensor:
    return ad.reshape(encode_image_view_sets([view_features], params, cfg), (cfg.image_dim,))
