"""End-to-end orchestration: dataset -> training -> map building -> evaluation.

Thin glue over the core modules so the CLI and the acceptance harness share
one code path.
"""

from __future__ import annotations

import logging
from typing import Dict, Sequence

from .dataset import Dataset
from .encoders import ModelConfig, init_model, params_from_arrays, params_to_arrays
from .fusion import embed_scene
from .io import load_checkpoint_with_meta, save_checkpoint_with_meta
from .retrieval import EmbeddingIndex, MapDatabase
from .training import TrainConfig, train

logger = logging.getLogger(__name__)


def model_config_for_dataset(dataset: Dataset, seed: int = 0, **overrides) -> ModelConfig:
    """Model sizing derived from the dataset header (feature dim, vocab sizes)."""
    attr_size, rel_size = dataset.vocab_sizes()
    kwargs = dict(feature_dim=dataset.feature_dim, attr_vocab_size=attr_size,
                  rel_vocab_size=rel_size, seed=seed)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def train_on_dataset(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                     modalities: Sequence[str]):
    """Initialize and train a model on the dataset's train split.

    Returns (params, curve). Samples whose scene lacks a temporal twin train
    with an empty temporal pair set.
    """
    params = init_model(model_cfg)
    items = []
    for sample, target_id in dataset.queries.get("train", []):
        target = dataset.graphs[target_id]
        twin_id = dataset.temporal_twin_of(target_id)
        temporal = dataset.graphs[twin_id] if twin_id else target
        items.append((sample, target, temporal))
    if not items:
        raise ValueError("dataset has no train split")
    pool = {sid: dataset.graphs[sid] for sid in dataset.static_scene_ids()}
    curve = train(items, dataset.containers, params, model_cfg, train_cfg,
                  list(modalities), scene_pool=pool)
    return params, curve


def save_model(path, params, model_cfg: ModelConfig, train_cfg: TrainConfig = None,
               modalities: Sequence[str] = None) -> None:
    meta = {"model_config": model_cfg.to_meta()}
    if train_cfg is not None:
        meta["train_config"] = train_cfg.to_meta()
    if modalities is not None:
        meta["modalities"] = list(modalities)
    save_checkpoint_with_meta(path, params_to_arrays(params), meta)


def load_model(path):
    """Returns (params, model_cfg, meta)."""
    arrays, meta = load_checkpoint_with_meta(path)
    if "model_config" not in meta:
        raise ValueError(f"checkpoint {path} carries no model configuration")
    cfg = ModelConfig.from_meta(meta["model_config"])
    return params_from_arrays(arrays), cfg, meta


def build_map(dataset: Dataset, params, model_cfg: ModelConfig,
              modalities: Sequence[str], variant: str = "static") -> MapDatabase:
    """Embed every scene of the chosen variant into an embedding database."""
    if variant == "static":
        scene_ids = dataset.static_scene_ids()
    elif variant == "temporal":
        scene_ids = dataset.temporal_scene_ids()
        if not scene_ids:
            raise ValueError("dataset has no temporal scans")
    else:
        raise ValueError(f"unknown map variant '{variant}'")
    indexes = []
    for sid in scene_ids:
        embeddings = embed_scene(dataset.graphs[sid], dataset.containers[sid],
                                 params, model_cfg, modalities)
        indexes.append(EmbeddingIndex.from_node_embeddings(sid, embeddings))
    return MapDatabase(model_cfg.joint_dim, indexes)


def temporal_target_map(dataset: Dataset) -> Dict[str, str]:
    """Static scene id -> its temporal twin id (for the temporal protocol)."""
    out = {}
    for sid in dataset.static_scene_ids():
        twin = dataset.temporal_twin_of(sid)
        if twin:
            out[sid] = twin
    return out


def category_maps(dataset: Dataset) -> Dict[str, Dict[int, int]]:
    return {sid: {n.node_id: n.category_id for n in g.nodes}
            for sid, g in dataset.graphs.items()}
