"""Scene-graph data model: nodes, edges, camera views, visibility, JSON I/O.

Graphs are immutable after load. Visibility uses a point-splat depth buffer
(one pixel per projected point, nearest depth wins) so that a node's count
only includes pixels it owns in front of every other node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class SchemaError(ValueError):
    """Scene-graph document violates the schema; message names the field path."""


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    relation_id: int


@dataclass
class CameraView:
    """Posed pinhole camera. `pose` maps world points into the camera frame."""

    view_id: int
    pose: np.ndarray           # 4x4 camera-from-world
    intrinsics: tuple          # (fx, fy, cx, cy) in pixels
    width: int
    height: int

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (4, 4):
            raise ValueError("pose must be a 4x4 transform")
        rot = self.pose[:3, :3]
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-6:
            raise ValueError(f"view {self.view_id}: rotation block is not orthonormal")
        fx, fy, cx, cy = self.intrinsics
        if fx <= 0 or fy <= 0:
            raise ValueError(f"view {self.view_id}: focal lengths must be positive")


@dataclass
class ObjectNode:
    node_id: int
    category_id: int
    centroid: np.ndarray            # (3,) meters
    points: np.ndarray              # (N, 3) meters
    attributes: np.ndarray          # counts over the attribute vocabulary
    rel_bow: np.ndarray             # counts over the relationship vocabulary
    view_refs: list = field(default_factory=list)  # (view_id, visible pixel count)

    def __post_init__(self):
        self.centroid = np.asarray(self.centroid, dtype=np.float64)
        self.points = np.asarray(self.points, dtype=np.float64)
        self.attributes = np.asarray(self.attributes, dtype=np.int64)
        self.rel_bow = np.asarray(self.rel_bow, dtype=np.int64)
        if self.centroid.shape != (3,):
            raise ValueError(f"node {self.node_id}: centroid must be a 3-vector")
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"node {self.node_id}: points must be an Nx3 matrix")
        if not np.all(np.isfinite(self.points)):
            raise ValueError(f"node {self.node_id}: points contain non-finite values")
        if np.any(self.attributes < 0) or np.any(self.rel_bow < 0):
            raise ValueError(f"node {self.node_id}: count vectors must be nonnegative")


@dataclass
class SceneGraph:
    scene_id: str
    place_id: str
    attribute_vocab: list
    relation_vocab: list
    nodes: list                     # list[ObjectNode]
    edges: list                     # list[Edge]
    views: list = field(default_factory=list)  # list[CameraView]
    temporal_of: Optional[str] = None

    def __post_init__(self):
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"scene {self.scene_id}: duplicate node ids")
        id_set = set(ids)
        for e in self.edges:
            for endpoint in (e.src, e.dst):
                if endpoint not in id_set:
                    raise ValueError(
                        f"scene {self.scene_id}: edge references missing node {endpoint}"
                    )
            if e.src == e.dst:
                raise ValueError(f"scene {self.scene_id}: self-loop on node {e.src}")
            if not 0 <= e.relation_id < len(self.relation_vocab):
                raise ValueError(
                    f"scene {self.scene_id}: relation_id {e.relation_id} outside vocabulary"
                )

    def node(self, node_id: int) -> ObjectNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def node_ids(self) -> list:
        return sorted(n.node_id for n in self.nodes)


# ---------------------------------------------------------------------------
# visibility


def _project(points: np.ndarray, view: CameraView):
    """Project world points; returns (u, v, depth) pixel coords and a front mask."""
    cam = points @ view.pose[:3, :3].T + view.pose[:3, 3]
    z = cam[:, 2]
    front = z > 1e-9
    fx, fy, cx, cy = view.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.floor(fx * cam[:, 0] / z + cx).astype(np.int64)
        v = np.floor(fy * cam[:, 1] / z + cy).astype(np.int64)
    inside = front & (u >= 0) & (u < view.width) & (v >= 0) & (v < view.height)
    return u, v, z, inside


def rasterize_depth(view: CameraView, nodes) -> np.ndarray:
    """Point-splat all nodes into a depth buffer; returns the owner-id map.

    Each in-frame point claims its pixel if it is nearer than every other
    point there; equal depths go to the lower node_id. Unowned pixels get -1.
    """
    owner = np.full((view.height, view.width), -1, dtype=np.int64)
    pix_parts, z_parts, id_parts = [], [], []
    for node in nodes:
        u, v, z, inside = _project(node.points, view)
        pix_parts.append(v[inside] * view.width + u[inside])
        z_parts.append(z[inside])
        id_parts.append(np.full(int(inside.sum()), node.node_id, dtype=np.int64))
    if not pix_parts:
        return owner
    pix = np.concatenate(pix_parts)
    if pix.size == 0:
        return owner
    z = np.concatenate(z_parts)
    ids = np.concatenate(id_parts)
    # per pixel the winner minimizes (depth, node_id)
    order = np.lexsort((ids, z, pix))
    pix_sorted = pix[order]
    first = np.ones(pix_sorted.size, dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    owner.reshape(-1)[pix_sorted[first]] = ids[order][first]
    return owner


def compute_visibility(node: ObjectNode, view: CameraView, all_nodes) -> int:
    """Pixel count of `node`'s projection that survives the shared depth test."""
    fx, fy, _, _ = view.intrinsics
    if fx <= 0 or fy <= 0:
        raise ValueError("invalid intrinsics")
    owner = rasterize_depth(view, all_nodes)
    return int(np.count_nonzero(owner == node.node_id))


def compute_view_refs(graph: SceneGraph) -> None:
    """Populate every node's (view_id, pixel count) list from the scene views."""
    counts = {n.node_id: [] for n in graph.nodes}
    for view in graph.views:
        owner = rasterize_depth(view, graph.nodes)
        owned, per = np.unique(owner[owner >= 0], return_counts=True)
        seen = dict(zip(owned.tolist(), per.tolist()))
        for n in graph.nodes:
            c = seen.get(n.node_id, 0)
            if c > 0:
                counts[n.node_id].append((view.view_id, c))
    for n in graph.nodes:
        n.view_refs = counts[n.node_id]


def select_top_views(node: ObjectNode, views, k_view: int):
    """Views sorted by descending visible pixel count, truncated to k_view.

    Zero-visibility views are never selected; equal counts break toward the
    lower view_id. Requires node.view_refs (see compute_view_refs).
    """
    if k_view < 1:
        raise ValueError("k_view must be >= 1")
    available = {v.view_id for v in views}
    ranked = sorted(
        ((vid, c) for vid, c in node.view_refs if c > 0 and vid in available),
        key=lambda vc: (-vc[1], vc[0]),
    )
    return ranked[:k_view]


# ---------------------------------------------------------------------------
# JSON document serialization


def points_ref_for(node_id: int) -> str:
    return f"point_cloud/{node_id}"


def _expect(cond: bool, path: str, msg: str):
    if not cond:
        raise SchemaError(f"{path}: {msg}")


def _int_list(raw, path: str, nonneg=True) -> list:
    _expect(isinstance(raw, list), path, "expected a list of integers")
    out = []
    for i, x in enumerate(raw):
        _expect(isinstance(x, int) and not isinstance(x, bool), f"{path}[{i}]", "expected an integer")
        if nonneg:
            _expect(x >= 0, f"{path}[{i}]", "must be nonnegative")
        out.append(x)
    return out


def _float_list(raw, path: str, length=None) -> list:
    _expect(isinstance(raw, list), path, "expected a list of numbers")
    if length is not None:
        _expect(len(raw) == length, path, f"expected {length} numbers, got {len(raw)}")
    out = []
    for i, x in enumerate(raw):
        _expect(isinstance(x, (int, float)) and not isinstance(x, bool), f"{path}[{i}]", "expected a number")
        _expect(np.isfinite(x), f"{path}[{i}]", "must be finite")
        out.append(float(x))
    return out


def scene_graph_to_document(graph: SceneGraph) -> dict:
    """Serialize to the canonical JSON document (points stay in the container)."""
    doc = {
        "scene_id": graph.scene_id,
        "place_id": graph.place_id,
        "attribute_vocab": list(graph.attribute_vocab),
        "relation_vocab": list(graph.relation_vocab),
        "nodes": [
            {
                "node_id": n.node_id,
                "category_id": n.category_id,
                "centroid": [float(x) for x in n.centroid],
                "points_ref": points_ref_for(n.node_id),
                "attributes": [int(x) for x in n.attributes],
                "rel_bow": [int(x) for x in n.rel_bow],
            }
            for n in sorted(graph.nodes, key=lambda n: n.node_id)
        ],
        "edges": [
            {"src": e.src, "dst": e.dst, "relation_id": e.relation_id}
            for e in graph.edges
        ],
        "views": [
            {
                "view_id": v.view_id,
                "pose": [float(x) for x in v.pose.reshape(-1)],
                "intrinsics": [float(x) for x in v.intrinsics],
                "width": v.width,
                "height": v.height,
            }
            for v in sorted(graph.views, key=lambda v: v.view_id)
        ],
    }
    if graph.temporal_of is not None:
        doc["temporal_of"] = graph.temporal_of
    return doc


def scene_graph_from_document(doc: dict, point_clouds: dict) -> SceneGraph:
    """Build a SceneGraph from a document plus node_id -> (N,3) point payloads.

    Raises SchemaError with a path-to-field diagnostic on any violation.
    """
    _expect(isinstance(doc, dict), "$", "document must be an object")
    for key in ("scene_id", "place_id", "attribute_vocab", "relation_vocab", "nodes", "edges", "views"):
        _expect(key in doc, f"$.{key}", "missing required field")
    _expect(isinstance(doc["scene_id"], str) and doc["scene_id"], "scene_id", "expected a non-empty string")
    _expect(isinstance(doc["place_id"], str) and doc["place_id"], "place_id", "expected a non-empty string")
    for vkey in ("attribute_vocab", "relation_vocab"):
        _expect(isinstance(doc[vkey], list), vkey, "expected a list of strings")
        for i, s in enumerate(doc[vkey]):
            _expect(isinstance(s, str), f"{vkey}[{i}]", "expected a string")
    _expect(isinstance(doc["nodes"], list) and len(doc["nodes"]) > 0, "nodes", "must be non-empty")

    attr_len = len(doc["attribute_vocab"])
    rel_len = len(doc["relation_vocab"])
    nodes = []
    for i, nd in enumerate(doc["nodes"]):
        path = f"nodes[{i}]"
        _expect(isinstance(nd, dict), path, "expected an object")
        for key in ("node_id", "category_id", "centroid", "points_ref", "attributes", "rel_bow"):
            _expect(key in nd, f"{path}.{key}", "missing required field")
        _expect(isinstance(nd["node_id"], int), f"{path}.node_id", "expected an integer")
        _expect(isinstance(nd["category_id"], int), f"{path}.category_id", "expected an integer")
        centroid = _float_list(nd["centroid"], f"{path}.centroid", length=3)
        attrs = _int_list(nd["attributes"], f"{path}.attributes")
        _expect(len(attrs) == attr_len, f"{path}.attributes", f"expected {attr_len} counts, got {len(attrs)}")
        rel = _int_list(nd["rel_bow"], f"{path}.rel_bow")
        _expect(len(rel) == rel_len, f"{path}.rel_bow", f"expected {rel_len} counts, got {len(rel)}")
        _expect(isinstance(nd["points_ref"], str), f"{path}.points_ref", "expected a string")
        _expect(
            nd["points_ref"] == points_ref_for(nd["node_id"]),
            f"{path}.points_ref",
            f"expected '{points_ref_for(nd['node_id'])}'",
        )
        _expect(
            nd["node_id"] in point_clouds,
            f"{path}.points_ref",
            f"no point cloud payload for node {nd['node_id']}",
        )
        nodes.append(
            ObjectNode(
                node_id=nd["node_id"],
                category_id=nd["category_id"],
                centroid=np.array(centroid),
                points=np.asarray(point_clouds[nd["node_id"]], dtype=np.float64),
                attributes=np.array(attrs, dtype=np.int64),
                rel_bow=np.array(rel, dtype=np.int64),
            )
        )

    node_ids = {n.node_id for n in nodes}
    edges = []
    for i, ed in enumerate(doc["edges"]):
        path = f"edges[{i}]"
        _expect(isinstance(ed, dict), path, "expected an object")
        for key in ("src", "dst", "relation_id"):
            _expect(key in ed and isinstance(ed[key], int), f"{path}.{key}", "expected an integer")
        for key in ("src", "dst"):
            _expect(ed[key] in node_ids, f"{path}.{key}", f"edge references missing node {ed[key]}")
        _expect(ed["src"] != ed["dst"], path, "self-loops are not allowed")
        _expect(0 <= ed["relation_id"] < rel_len, f"{path}.relation_id", "outside relation vocabulary")
        edges.append(Edge(ed["src"], ed["dst"], ed["relation_id"]))

    views = []
    for i, vd in enumerate(doc["views"]):
        path = f"views[{i}]"
        _expect(isinstance(vd, dict), path, "expected an object")
        for key in ("view_id", "pose", "intrinsics", "width", "height"):
            _expect(key in vd, f"{path}.{key}", "missing required field")
        pose = np.array(_float_list(vd["pose"], f"{path}.pose", length=16)).reshape(4, 4)
        intr = _float_list(vd["intrinsics"], f"{path}.intrinsics", length=4)
        _expect(isinstance(vd["width"], int) and vd["width"] > 0, f"{path}.width", "expected a positive integer")
        _expect(isinstance(vd["height"], int) and vd["height"] > 0, f"{path}.height", "expected a positive integer")
        try:
            views.append(
                CameraView(vd["view_id"], pose, tuple(intr), vd["width"], vd["height"])
            )
        except ValueError as err:
            raise SchemaError(f"{path}: {err}") from err

    temporal_of = doc.get("temporal_of")
    if temporal_of is not None:
        _expect(isinstance(temporal_of, str), "temporal_of", "expected a string")

    try:
        return SceneGraph(
            scene_id=doc["scene_id"],
            place_id=doc["place_id"],
            attribute_vocab=list(doc["attribute_vocab"]),
            relation_vocab=list(doc["relation_vocab"]),
            nodes=nodes,
            edges=edges,
            views=views,
            temporal_of=temporal_of,
        )
    except ValueError as err:
        raise SchemaError(str(err)) from err
