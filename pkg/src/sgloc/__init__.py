"""Cross-modal coarse localization of query images in 3D scene-graph maps.

A scene is a graph of object nodes carrying up to five modalities (point
cloud, multi-view image features, structure, relationships, attributes).
Nodes and query-image patches are embedded into one metric space; a query is
localized by nearest-neighbor matching of its patches against each candidate
scene and ranking scenes by the mean matched similarity.
"""

from .encoders import ModelConfig, ViewFeature, init_model
from .fusion import NodeEmbedding, QuerySample, embed_query, embed_scene
from .metric import Embedding, ModalityWeights, cosine_distance, l2_normalize, modality_softmax
from .retrieval import EmbeddingIndex, MapDatabase, SceneScore, rank_scenes, scene_score
from .scenegraph import CameraView, Edge, ObjectNode, SceneGraph
from .training import TrainConfig, build_pairs, pair_probability, static_loss, temporal_loss

__version__ = "0.1.0"

__all__ = [
    "CameraView",
    "Edge",
    "Embedding",
    "EmbeddingIndex",
    "MapDatabase",
    "ModalityWeights",
    "ModelConfig",
    "NodeEmbedding",
    "ObjectNode",
    "QuerySample",
    "SceneGraph",
    "SceneScore",
    "TrainConfig",
    "ViewFeature",
    "build_pairs",
    "cosine_distance",
    "embed_query",
    "embed_scene",
    "init_model",
    "l2_normalize",
    "modality_softmax",
    "pair_probability",
    "rank_scenes",
    "scene_score",
    "static_loss",
    "temporal_loss",
]
