"""Scene-graph geometry: document parsing, point projection, visibility,
and multi-level crop boxes."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .container import KIND_POINT_CLOUD, read_container


@dataclass
class View:
    view_id: int
    pose: np.ndarray                # 4x4 camera-from-world
    intrinsics: Tuple[float, float, float, float]
    width: int
    height: int


@dataclass
class Scene:
    scene_id: str
    node_points: Dict[int, np.ndarray]
    views: List[View]


@dataclass
class CropSpec:
    """Nested pixel rectangles (x0, y0, x1, y1), exclusive upper bounds."""

    view_id: int
    node_id: int
    boxes: List[Tuple[int, int, int, int]]


def load_scene(json_path, features_path=None) -> Scene:
    """Parse a scene document; point clouds come from the sibling container."""
    json_path = Path(json_path)
    doc = json.loads(json_path.read_text(encoding="utf-8"))
    if features_path is None:
        candidates = [
            json_path.with_suffix(".sglf"),
            json_path.parent.parent / "features" / f"{doc['scene_id']}.sglf",
        ]
        features_path = next((c for c in candidates if c.exists()), None)
        if features_path is None:
            raise FileNotFoundError(f"no feature container found for {doc['scene_id']}")
    _dim, records = read_container(features_path)
    node_points = {}
    for nd in doc["nodes"]:
        key = (KIND_POINT_CLOUD, nd["node_id"], 0)
        if key not in records:
            raise KeyError(f"scene {doc['scene_id']}: no point cloud for node {nd['node_id']}")
        node_points[nd["node_id"]] = records[key].astype(np.float64)
    views = [
        View(
            view_id=vd["view_id"],
            pose=np.array(vd["pose"], dtype=np.float64).reshape(4, 4),
            intrinsics=tuple(vd["intrinsics"]),
            width=vd["width"],
            height=vd["height"],
        )
        for vd in doc["views"]
    ]
    return Scene(doc["scene_id"], node_points, views)


def project_points(points: np.ndarray, view: View):
    """Pixel coordinates, depths, and the in-frame mask for world points."""
    cam = points @ view.pose[:3, :3].T + view.pose[:3, 3]
    z = cam[:, 2]
    front = z > 1e-9
    fx, fy, cx, cy = view.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.floor(fx * cam[:, 0] / z + cx).astype(np.int64)
        v = np.floor(fy * cam[:, 1] / z + cy).astype(np.int64)
    inside = front & (u >= 0) & (u < view.width) & (v >= 0) & (v < view.height)
    return u, v, z, inside


def owner_map(scene: Scene, view: View) -> np.ndarray:
    """Depth-buffered pixel ownership over all nodes (-1 for background)."""
    owner = np.full((view.height, view.width), -1, dtype=np.int64)
    depth = np.full((view.height, view.width), np.inf)
    for node_id in sorted(scene.node_points):
        u, v, z, inside = project_points(scene.node_points[node_id], view)
        for ui, vi, zi in zip(u[inside], v[inside], z[inside]):
            if zi < depth[vi, ui]:
                depth[vi, ui] = zi
                owner[vi, ui] = node_id
    return owner


def visibility_counts(scene: Scene, view: View) -> Dict[int, int]:
    owner = owner_map(scene, view)
    ids, counts = np.unique(owner[owner >= 0], return_counts=True)
    out = {nid: 0 for nid in scene.node_points}
    out.update(dict(zip(ids.tolist(), counts.tolist())))
    return out


def top_views(scene: Scene, node_id: int, k_view: int) -> List[Tuple[int, int]]:
    """Views ranked by the node's visible pixel count; zero counts dropped."""
    ranked = []
    for view in scene.views:
        count = visibility_counts(scene, view)[node_id]
        if count > 0:
            ranked.append((view.view_id, count))
    ranked.sort(key=lambda vc: (-vc[1], vc[0]))
    return ranked[:k_view]


def compute_crop_boxes(scene: Scene, node_id: int, view: View, levels: int,
                       expand: float = 0.2) -> CropSpec:
    """Tight box of the node's visible pixels, then `levels - 1` enlargements.

    Each level grows the previous one by `expand` of the base box's width and
    height on every side, clamped to the image bounds; the boxes stay nested.
    """
    owner = owner_map(scene, view)
    ys, xs = np.where(owner == node_id)
    if xs.size == 0:
        raise ValueError(f"node {node_id} has zero visibility in view {view.view_id}")
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    w0, h0 = x1 - x0, y1 - y0
    boxes = []
    for level in range(levels):
        dx = int(round(level * expand * w0))
        dy = int(round(level * expand * h0))
        boxes.append((
            max(0, x0 - dx),
            max(0, y0 - dy),
            min(view.width, x1 + dx),
            min(view.height, y1 + dy),
        ))
    return CropSpec(view.view_id, node_id, boxes)
