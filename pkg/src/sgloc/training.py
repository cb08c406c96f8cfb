"""Contrastive training: pair building, the bi-directional N-pair losses,
exact gradients through every encoder, and the optimization loop.

Loss terms follow the candidate-pool construction where each labeled patch q
paired with its node v competes against (a) other labeled patches of the same
image seeing different nodes and (b) every node of the candidate graphs except
v itself. Static and temporal variants share all machinery; the temporal side
swaps in the rescan graph and its candidate pool.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import ModelConfig, zero_gradients
from .fusion import QuerySample, embed_scene_tensors, encode_patch_grids
from .scenegraph import SceneGraph

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """The loss became non-finite; training aborts with diagnostics."""


@dataclass
class TrainConfig:
    alpha: float = 0.5
    tau: float = 0.1
    lr: float = 0.0011
    batch_size: int = 16
    negatives_per_sample: int = 9
    epochs: int = 30
    lr_step_period: int = 10
    lr_step_factor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def lr_at_epoch(self, epoch: int) -> float:
        return self.lr * self.lr_step_factor ** (epoch // self.lr_step_period)

    def to_meta(self) -> dict:
        return asdict(self)


def parse_train_config(path) -> TrainConfig:
    """Flat `key = value` config file; '#' starts a comment."""
    values = {}
    fields = TrainConfig.__dataclass_fields__
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown key '{key}'")
            caster = fields[key].type
            values[key] = int(value) if caster == "int" else float(value)
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# pair construction


@dataclass
class PairSet:
    """Supervised pairs of one query sample plus their negative index sets.

    Candidate lists are (scene_id, node_id) in a fixed order: target (resp.
    temporal) graph nodes first, then each negative scene's nodes, all sorted
    by node_id within a scene. Negative sets index into those lists.
    """

    pairs: List[Tuple[int, int]]
    temporal_pairs: List[Tuple[int, int]]
    image_negatives: List[np.ndarray]
    graph_negatives: List[np.ndarray]
    temporal_image_negatives: List[np.ndarray]
    temporal_graph_negatives: List[np.ndarray]
    static_candidates: List[Tuple[str, int]]
    temporal_candidates: List[Tuple[str, int]]


def _candidate_list(primary: SceneGraph, negatives: Sequence[SceneGraph]) -> List[Tuple[str, int]]:
    out = [(primary.scene_id, nid) for nid in primary.node_ids()]
    for g in negatives:
        out.extend((g.scene_id, nid) for nid in g.node_ids())
    return out


def build_pairs(sample: QuerySample, target: SceneGraph, temporal: SceneGraph,
                negatives: Sequence[SceneGraph]) -> PairSet:
    """Assemble supervised pairs and negative sets for one query sample.

    Only labeled patches (gt != -1) form pairs or appear in image-negative
    sets; unlabeled patches may depict unannotated background.
    """
    if temporal.place_id != target.place_id:
        raise ValueError(
            f"temporal graph {temporal.scene_id} is from place {temporal.place_id}, "
            f"expected {target.place_id}"
        )
    gt = sample.flat_gt_node()
    labeled = np.where(gt >= 0)[0]
    if labeled.size == 0:
        raise ValueError("no supervised pairs: sample has no labeled patches")

    target_ids = set(target.node_ids())
    temporal_ids = set(temporal.node_ids())
    pairs = [(int(q), int(gt[q])) for q in labeled if int(gt[q]) in target_ids]
    if not pairs:
        raise ValueError("no supervised pairs: no label matches a target node")
    temporal_pairs = [(q, v) for q, v in pairs if v in temporal_ids]

    def image_negs(v: int) -> np.ndarray:
        return np.array([int(q) for q in labeled if int(gt[q]) != v], dtype=np.intp)

    static_candidates = _candidate_list(target, negatives)
    temporal_candidates = _candidate_list(temporal, negatives)
    static_index = {key: i for i, key in enumerate(static_candidates)}
    temporal_index = {key: i for i, key in enumerate(temporal_candidates)}

    image_negatives = [image_negs(v) for _, v in pairs]
    graph_negatives = [
        np.array([i for i in range(len(static_candidates))
                  if i != static_index[(target.scene_id, v)]], dtype=np.intp)
        for _, v in pairs
    ]
    temporal_image_negatives = [image_negs(v) for _, v in temporal_pairs]
    temporal_graph_negatives = [
        np.array([i for i in range(len(temporal_candidates))
                  if i != temporal_index[(temporal.scene_id, v)]], dtype=np.intp)
        for _, v in temporal_pairs
    ]
    return PairSet(
        pairs=pairs,
        temporal_pairs=temporal_pairs,
        image_negatives=image_negatives,
        graph_negatives=graph_negatives,
        temporal_image_negatives=temporal_image_negatives,
        temporal_graph_negatives=temporal_graph_negatives,
        static_candidates=static_candidates,
        temporal_candidates=temporal_candidates,
    )


# ---------------------------------------------------------------------------
# scalar reference losses (plain numpy; the batched path must agree)


def _delta_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    return 0.5 * (1.0 - an @ bn.T)


def pair_probability(e_q, e_v, image_neg_embeddings, graph_neg_embeddings, tau: float) -> float:
    """Probability of retrieving v from q against the pooled negatives."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    e_q = np.asarray(e_q, dtype=np.float64)
    e_v = np.asarray(e_v, dtype=np.float64)

    def f(a, b):
        return math.exp(-float(_delta_matrix(a[None], b[None])[0, 0]) / tau)

    pos = f(e_q, e_v)
    denom = pos
    for neg in image_neg_embeddings:
        denom += f(e_q, np.asarray(neg, dtype=np.float64))
    for neg in graph_neg_embeddings:
        denom += f(e_q, np.asarray(neg, dtype=np.float64))
    return pos / denom


def _side_losses(pairs, image_negatives, graph_negatives, candidate_rows,
                 patch_embeddings: np.ndarray, candidate_embeddings: np.ndarray,
                 tau: float) -> np.ndarray:
    """Per-pair -log(mean of both retrieval directions); numpy reference."""
    f_qp = np.exp(-_delta_matrix(patch_embeddings, patch_embeddings) / tau)
    f_qn = np.exp(-_delta_matrix(patch_embeddings, candidate_embeddings) / tau)
    f_nn = np.exp(-_delta_matrix(candidate_embeddings, candidate_embeddings) / tau)
    terms = []
    for (q, _v), img_neg, gr_neg, row in zip(pairs, image_negatives, graph_negatives, candidate_rows):
        pos = f_qn[q, row]
        p_qv = pos / (pos + f_qp[q, img_neg].sum() + f_qn[q, gr_neg].sum())
        p_vq = pos / (pos + f_qn[:, row][img_neg].sum() + f_nn[row, gr_neg].sum())
        terms.append(-math.log(0.5 * p_qv + 0.5 * p_vq))
    return np.array(terms)


def static_loss(pair_set: PairSet, patch_embeddings: np.ndarray,
                candidate_embeddings: np.ndarray, tau: float) -> float:
    """Mean bi-directional N-pair loss over the static pairs of one sample."""
    if not pair_set.pairs:
        raise ValueError("empty pair set")
    index = {key: i for i, key in enumerate(pair_set.static_candidates)}
    rows = [index[(pair_set.static_candidates[0][0], v)] for _, v in pair_set.pairs]
    terms = _side_losses(pair_set.pairs, pair_set.image_negatives, pair_set.graph_negatives,
                         rows, patch_embeddings, candidate_embeddings, tau)
    return float(terms.mean())


def temporal_loss(pair_set: PairSet, patch_embeddings: np.ndarray,
                  candidate_embeddings: np.ndarray, tau: float) -> float:
    """As static_loss but over the temporal pairs and candidate pool."""
    if not pair_set.temporal_pairs:
        return 0.0
    index = {key: i for i, key in enumerate(pair_set.temporal_candidates)}
    rows = [index[(pair_set.temporal_candidates[0][0], v)] for _, v in pair_set.temporal_pairs]
    terms = _side_losses(pair_set.temporal_pairs, pair_set.temporal_image_negatives,
                         pair_set.temporal_graph_negatives, rows,
                         patch_embeddings, candidate_embeddings, tau)
    return float(terms.mean())


def total_loss(static: float, temporal: float, alpha: float) -> float:
    return alpha * static + (1.0 - alpha) * temporal


@dataclass
class LossBreakdown:
    total: float
    static_part: float
    temporal_part: float
    per_sample_static: List[float] = field(default_factory=list)
    per_sample_temporal: List[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# batched autodiff loss


def _pair_mask(n_rows: int, n_cols: int, per_row_indices) -> np.ndarray:
    mask = np.zeros((n_rows, n_cols))
    for i, idx in enumerate(per_row_indices):
        mask[i, idx] = 1.0
    return mask


def _side_loss_tensor(pairs, image_negatives, graph_negatives, candidate_rows,
                      patch_emb: Tensor, candidate_emb: Tensor, tau: float) -> Tensor:
    m = len(pairs)
    q_rows = np.array([q for q, _ in pairs], dtype=np.intp)
    v_rows = np.array(candidate_rows, dtype=np.intp)
    inv_tau = -1.0 / tau

    p_sel = ad.take_rows(patch_emb, q_rows)                     # (m, D)
    v_sel = ad.take_rows(candidate_emb, v_rows)                 # (m, D)
    f_q_patches = ad.exp(ad.mul(ad.pairwise_cosine_distance(p_sel, patch_emb), inv_tau))
    f_q_nodes = ad.exp(ad.mul(ad.pairwise_cosine_distance(p_sel, candidate_emb), inv_tau))
    f_v_patches = ad.exp(ad.mul(ad.pairwise_cosine_distance(v_sel, patch_emb), inv_tau))
    f_v_nodes = ad.exp(ad.mul(ad.pairwise_cosine_distance(v_sel, candidate_emb), inv_tau))

    f_pos = ad.gather_pairs(f_q_nodes, np.arange(m), v_rows)    # (m,)

    img_mask = _pair_mask(m, patch_emb.data.shape[0], image_negatives)
    gr_mask = _pair_mask(m, candidate_emb.data.shape[0], graph_negatives)
    s_img_q = ad.tsum(ad.mul(f_q_patches, img_mask), axis=1)
    s_gr_q = ad.tsum(ad.mul(f_q_nodes, gr_mask), axis=1)
    s_img_v = ad.tsum(ad.mul(f_v_patches, img_mask), axis=1)
    s_gr_v = ad.tsum(ad.mul(f_v_nodes, gr_mask), axis=1)

    p_qv = ad.div(f_pos, ad.add(f_pos, ad.add(s_img_q, s_gr_q)))
    p_vq = ad.div(f_pos, ad.add(f_pos, ad.add(s_img_v, s_gr_v)))
    terms = ad.mul(ad.log(ad.add(ad.mul(p_qv, 0.5), ad.mul(p_vq, 0.5))), -1.0)
    return ad.tmean(terms)


def sample_loss_tensors(pair_set: PairSet, patch_emb: Tensor,
                        scene_embeddings: Dict[str, Tuple[List[int], Tensor]],
                        tau: float) -> Tuple[Tensor, Optional[Tensor]]:
    """(static, temporal) scalar loss tensors for one sample.

    scene_embeddings maps scene_id -> (sorted node ids, (n, D) tensor); the
    candidate matrices are gathered from it so each graph is embedded once
    per step no matter how many samples reference it.
    """

    def candidate_tensor(candidates):
        scene_order = list(dict.fromkeys(sid for sid, _ in candidates))
        blocks = []
        for sid in scene_order:
            node_ids, emb = scene_embeddings[sid]
            wanted = [nid for s, nid in candidates if s == sid]
            index = {nid: r for r, nid in enumerate(node_ids)}
            blocks.append(ad.take_rows(emb, [index[nid] for nid in wanted]))
        return ad.concat(blocks, axis=0) if len(blocks) > 1 else blocks[0]

    static_index = {key: i for i, key in enumerate(pair_set.static_candidates)}
    static_cand = candidate_tensor(pair_set.static_candidates)
    primary = pair_set.static_candidates[0][0]
    static_rows = [static_index[(primary, v)] for _, v in pair_set.pairs]
    static = _side_loss_tensor(pair_set.pairs, pair_set.image_negatives,
                               pair_set.graph_negatives, static_rows,
                               patch_emb, static_cand, tau)
    temporal = None
    if pair_set.temporal_pairs:
        temporal_index = {key: i for i, key in enumerate(pair_set.temporal_candidates)}
        temporal_cand = candidate_tensor(pair_set.temporal_candidates)
        t_primary = pair_set.temporal_candidates[0][0]
        temporal_rows = [temporal_index[(t_primary, v)] for _, v in pair_set.temporal_pairs]
        temporal = _side_loss_tensor(pair_set.temporal_pairs, pair_set.temporal_image_negatives,
                                     pair_set.temporal_graph_negatives, temporal_rows,
                                     patch_emb, temporal_cand, tau)
    return static, temporal


@dataclass
class BatchItem:
    """One training sample with its target, temporal, and negative graphs."""

    sample: QuerySample
    target: SceneGraph
    temporal: SceneGraph
    negatives: List[SceneGraph]
    pair_set: PairSet = None

    def __post_init__(self):
        if self.pair_set is None:
            self.pair_set = build_pairs(self.sample, self.target, self.temporal, self.negatives)


def batch_loss_tensor(items: List[BatchItem], containers, params, cfg: ModelConfig,
                      modalities, alpha: float, tau: float):
    """Total loss tensor over a batch; embeds each needed graph exactly once.

    containers maps scene_id -> FeatureContainer. Returns (loss, breakdown).
    """
    needed: Dict[str, SceneGraph] = {}
    for item in items:
        for g in [item.target, item.temporal, *item.negatives]:
            needed.setdefault(g.scene_id, g)
    scene_embeddings = {
        sid: embed_scene_tensors(g, containers[sid], params, cfg, modalities)
        for sid, g in sorted(needed.items())
    }

    grids = np.stack([item.sample.patch_features for item in items])
    all_patches = encode_patch_grids(grids, params, cfg)
    n_per = items[0].sample.n_patches

    static_terms, temporal_terms = [], []
    per_static, per_temporal = [], []
    for i, item in enumerate(items):
        patch_emb = ad.take_rows(all_patches, np.arange(i * n_per, (i + 1) * n_per))
        static, temporal = sample_loss_tensors(item.pair_set, patch_emb, scene_embeddings, tau)
        static_terms.append(static)
        per_static.append(float(static.data))
        if temporal is None:
            logger.warning("sample %s has no temporal pairs; contributes 0 to the temporal loss",
                           item.sample.image_id)
            per_temporal.append(0.0)
        else:
            temporal_terms.append(temporal)
            per_temporal.append(float(temporal.data))

    def mean_of(terms):
        summed = terms[0]
        for t in terms[1:]:
            summed = ad.add(summed, t)
        return ad.mul(summed, 1.0 / len(items))

    batch_static = mean_of(static_terms)
    batch_temporal = mean_of(temporal_terms) if temporal_terms else ad.Tensor(0.0)
    loss = ad.add(ad.mul(batch_static, alpha), ad.mul(batch_temporal, 1.0 - alpha))
    breakdown = LossBreakdown(
        total=float(loss.data),
        static_part=float(batch_static.data),
        temporal_part=float(batch_temporal.data),
        per_sample_static=per_static,
        per_sample_temporal=per_temporal,
    )
    return loss, breakdown


def compute_gradients(items: List[BatchItem], containers, params, cfg: ModelConfig,
                      modalities, alpha: float, tau: float):
    """Exact gradients of the batch loss for every registered parameter."""
    zero_gradients(params)
    loss, breakdown = batch_loss_tensor(items, containers, params, cfg, modalities, alpha, tau)
    if not np.isfinite(loss.data):
        raise TrainingDiverged(f"non-finite loss {loss.data!r}")
    loss.backward()
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for name, t in params.items()}
    return breakdown, grads


# ---------------------------------------------------------------------------
# optimizer and loop


class Adam:
    """Adaptive-moment estimation with bias correction."""

    def __init__(self, params: Dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params: Dict[str, Tensor], grads: Dict[str, np.ndarray], lr: float):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name in sorted(params):
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / b1c
            v_hat = self.v[name] / b2c
            params[name].data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class CurveRow:
    epoch: int
    static: float
    temporal: float
    total: float
    lr: float


def write_curve_csv(path, rows: List[CurveRow], header_meta: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        meta = " ".join(f"{k}={v}" for k, v in sorted(header_meta.items()))
        f.write(f"# {meta}\n")
        f.write("epoch,static,temporal,total,lr\n")
        for r in rows:
            f.write(f"{r.epoch},{r.static:.10g},{r.temporal:.10g},{r.total:.10g},{r.lr:.10g}\n")


def train(train_items, containers, params, cfg: ModelConfig, config: TrainConfig,
          modalities, scene_pool: Dict[str, SceneGraph] = None):
    """Run the optimization loop over prebuilt (sample, target, temporal) triples.

    train_items: list of (sample, target, temporal) without negatives; negative
    scenes are drawn per sample per epoch from scene_pool (seeded). Returns the
    per-epoch loss curve; params are updated in place.
    """
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(params)
    curve: List[CurveRow] = []
    pool = scene_pool or {}

    for epoch in range(config.epochs):
        lr = config.lr_at_epoch(epoch)
        order = rng.permutation(len(train_items))
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            items = []
            for j in chunk:
                sample, target, temporal = train_items[j]
                negatives = _sample_negatives(rng, pool, target, config.negatives_per_sample)
                items.append(BatchItem(sample, target, temporal, negatives))
            breakdown, grads = compute_gradients(items, containers, params, cfg,
                                                 modalities, config.alpha, config.tau)
            optimizer.step(params, grads, lr)
            sums += (breakdown.static_part, breakdown.temporal_part, breakdown.total)
            n_batches += 1
        static_m, temporal_m, total_m = sums / max(n_batches, 1)
        curve.append(CurveRow(epoch, static_m, temporal_m, total_m, lr))
        logger.info("epoch %d: static %.4f temporal %.4f total %.4f lr %.5g",
                    epoch, static_m, temporal_m, total_m, lr)
    return curve


def _sample_negatives(rng, pool: Dict[str, SceneGraph], target: SceneGraph, n: int):
    """Draw n whole scenes from other places, seeded and order-deterministic."""
    eligible = sorted(sid for sid, g in pool.items()
                      if g.place_id != target.place_id and g.temporal_of is None)
    if not eligible:
        return []
    take = min(n, len(eligible))
    picked = rng.choice(len(eligible), size=take, replace=False)
    return [pool[eligible[i]] for i in sorted(picked)]
