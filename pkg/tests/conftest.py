"""Shared fixtures: miniature model configs and synthetic graph builders."""

import numpy as np
import pytest

from sgloc.encoders import ModelConfig, init_model
from sgloc.io import KIND_POINT_CLOUD, KIND_VIEW_LEVELS, FeatureContainer, FeatureRecord
from sgloc.scenegraph import CameraView, Edge, ObjectNode, SceneGraph


def mini_config(**overrides) -> ModelConfig:
    """Small widths for fast tests and finite-difference checks."""
    base = dict(
        feature_dim=6,
        point_dim=5,
        image_dim=8,
        struct_dim=5,
        bow_dim=5,
        joint_dim=8,
        point_hidden=(6, 7),
        bow_hidden=6,
        attn_heads=2,
        attn_layers=2,
        ff_dim=10,
        fusion_hidden=9,
        patch_channels=6,
        patch_blocks=2,
        patch_hidden=7,
        levels=2,
        k_view=4,
        attr_vocab_size=3,
        rel_vocab_size=3,
        seed=0,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def mini_cfg():
    return mini_config()


@pytest.fixture
def mini_params(mini_cfg):
    return init_model(mini_cfg)


def look_at_pose(position, target):
    """Camera-from-world pose looking from `position` toward `target`."""
    position = np.asarray(position, dtype=float)
    fwd = np.asarray(target, dtype=float) - position
    fwd = fwd / np.linalg.norm(fwd)
    up_hint = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(fwd, up_hint)) > 0.99:
        up_hint = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up_hint)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r_world_from_cam = np.stack([right, down, fwd], axis=1)
    pose = np.eye(4)
    pose[:3, :3] = r_world_from_cam.T
    pose[:3, 3] = -r_world_from_cam.T @ position
    return pose


def build_scene(scene_id="scene_0", n_nodes=3, n_views=3, cfg=None, seed=0,
                points_per_node=24, with_edges=True):
    """Random but valid scene graph plus a matching feature container."""
    cfg = cfg or mini_config()
    rng = np.random.default_rng(seed)
    nodes = []
    for nid in range(n_nodes):
        centroid = rng.uniform([-1.5, -1.5, 0.2], [1.5, 1.5, 1.8])
        pts = centroid + rng.uniform(-0.3, 0.3, size=(points_per_node, 3))
        nodes.append(
            ObjectNode(
                node_id=nid,
                category_id=int(rng.integers(0, 4)),
                centroid=pts.mean(axis=0),
                points=pts,
                attributes=rng.integers(0, 3, cfg.attr_vocab_size),
                rel_bow=rng.integers(0, 3, cfg.rel_vocab_size),
            )
        )
    edges = []
    if with_edges and n_nodes >= 2:
        edges = [Edge(i, i + 1, int(rng.integers(0, cfg.rel_vocab_size)))
                 for i in range(n_nodes - 1)]
    views = []
    for vid in range(n_views):
        angle = 2 * np.pi * vid / max(n_views, 1)
        pos = np.array([3.0 * np.cos(angle), 3.0 * np.sin(angle), 1.2])
        views.append(CameraView(vid, look_at_pose(pos, [0, 0, 1.0]), (40.0, 40.0, 24.0, 18.0), 48, 36))
    graph = SceneGraph(
        scene_id=scene_id,
        place_id=f"place_{scene_id}",
        attribute_vocab=[f"attr{i}" for i in range(cfg.attr_vocab_size)],
        relation_vocab=[f"rel{i}" for i in range(cfg.rel_vocab_size)],
        nodes=nodes,
        edges=edges,
        views=views,
    )
    container = FeatureContainer(cfg.feature_dim)
    for n in nodes:
        container.add(FeatureRecord(KIND_POINT_CLOUD, n.node_id, 0,
                                    n.points.astype(np.float32)))
        for v in views:
            levels = rng.standard_normal((cfg.levels, cfg.feature_dim)).astype(np.float32)
            container.add(FeatureRecord(KIND_VIEW_LEVELS, n.node_id, v.view_id, levels))
    return graph, container
