"""On-disk dataset access: scene documents, feature containers, query samples."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .fusion import QuerySample
from .io import KIND_POINT_CLOUD, FeatureContainer
from .scenegraph import SceneGraph, scene_graph_from_document


@dataclass
class Dataset:
    root: Path
    graphs: Dict[str, SceneGraph]
    containers: Dict[str, FeatureContainer]
    queries: Dict[str, List[Tuple[QuerySample, str]]]   # split -> (sample, target)
    manifest: dict = field(default_factory=dict)

    def static_scene_ids(self) -> List[str]:
        return sorted(sid for sid, g in self.graphs.items() if g.temporal_of is None)

    def temporal_scene_ids(self) -> List[str]:
        return sorted(sid for sid, g in self.graphs.items() if g.temporal_of is not None)

    def temporal_twin_of(self, scene_id: str) -> Optional[str]:
        for sid, g in self.graphs.items():
            if g.temporal_of == scene_id:
                return sid
        return None

    @property
    def feature_dim(self) -> int:
        return next(iter(self.containers.values())).feature_dim

    def vocab_sizes(self) -> Tuple[int, int]:
        g = next(iter(self.graphs.values()))
        return len(g.attribute_vocab), len(g.relation_vocab)


def load_query(json_path: Path) -> Tuple[QuerySample, str]:
    meta = json.loads(json_path.read_text(encoding="utf-8"))
    container = FeatureContainer.load(json_path.parent / meta["features_ref"])
    feats = container.patch_grid(meta["image_id"])
    sample = QuerySample(
        image_id=int(meta["image_id"]),
        patch_features=feats,
        gt_node=np.array(meta["gt_node"], dtype=np.int64),
        gt_category=np.array(meta["gt_category"], dtype=np.int64),
    )
    return sample, meta["scene_id"]


def load_dataset(root) -> Dataset:
    """Read a dataset directory written by the synthetic generator (or any
    producer of the same layout): scenes/*.json + features/*.sglf +
    queries/<split>/<image_id>.{json,sglf}."""
    root = Path(root)
    scenes_dir = root / "scenes"
    if not scenes_dir.is_dir():
        raise FileNotFoundError(f"no scenes/ directory under {root}")
    graphs, containers = {}, {}
    for doc_path in sorted(scenes_dir.glob("*.json")):
        doc = json.loads(doc_path.read_text(encoding="utf-8"))
        container = FeatureContainer.load(root / "features" / f"{doc['scene_id']}.sglf")
        clouds = {key[1]: rec.array.astype(np.float64)
                  for key, rec in container.records.items() if key[0] == KIND_POINT_CLOUD}
        graph = scene_graph_from_document(doc, clouds)
        graphs[graph.scene_id] = graph
        containers[graph.scene_id] = container
    queries: Dict[str, List[Tuple[QuerySample, str]]] = {}
    queries_dir = root / "queries"
    if queries_dir.is_dir():
        for split_dir in sorted(p for p in queries_dir.iterdir() if p.is_dir()):
            paths = sorted(split_dir.glob("*.json"), key=lambda p: int(p.stem))
            queries[split_dir.name] = [load_query(p) for p in paths]
    manifest = {}
    manifest_path = root / "world.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    return Dataset(root, graphs, containers, queries, manifest)
