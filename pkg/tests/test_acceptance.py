"""Acceptance suite: one test per criterion, printed pass lines included.

Every tolerance is pinned here; nothing is deferred to later calibration.
The end-to-end criteria (3, 4) train real models and dominate the runtime.
"""

import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from sgloc import autodiff as ad
from sgloc.dataset import load_dataset
from sgloc.encoders import (
    ModelConfig,
    ViewFeature,
    encode_image_view_sets,
    encode_point_cloud,
    encode_structure,
    init_model,
    zero_gradients,
)
from sgloc.evaluation import evaluate_queries, recall_at_k
from sgloc.fusion import QuerySample
from sgloc.io import save_embedding_db
from sgloc.pipeline import (
    build_map,
    model_config_for_dataset,
    temporal_target_map,
    train_on_dataset,
)
from sgloc.retrieval import EmbeddingIndex, MapDatabase, scene_score
from sgloc.synthetic import SyntheticWorldConfig, generate_world, write_dataset
from sgloc.training import (
    BatchItem,
    PairSet,
    TrainConfig,
    batch_loss_tensor,
    static_loss,
    temporal_loss,
)

from conftest import build_scene, mini_config

DESK_WIDTHS = dict(point_dim=64, image_dim=96, struct_dim=64, bow_dim=64, joint_dim=192,
                   point_hidden=(32, 64), bow_hidden=64, ff_dim=192, fusion_hidden=256,
                   patch_channels=96, patch_hidden=256)
ALL_MODALITIES = ["P", "I", "S", "R", "A"]


def report(criterion, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] criterion {criterion}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# -- criterion 1 -------------------------------------------------------------


def test_criterion_1_gradient_exactness():
    """Analytic gradients of the total loss match central finite differences."""
    started = time.monotonic()
    cfg = mini_config()
    params = init_model(cfg)
    graphs = {}
    containers = {}
    target, container = build_scene("mini_a", n_nodes=3, cfg=cfg, seed=1)
    graphs["mini_a"], containers["mini_a"] = target, container
    import copy

    twin_nodes = copy.deepcopy(target.nodes[:-1])
    from sgloc.scenegraph import SceneGraph

    twin = SceneGraph("mini_a_t", target.place_id, target.attribute_vocab,
                      target.relation_vocab, twin_nodes,
                      [e for e in target.edges
                       if e.src in {n.node_id for n in twin_nodes}
                       and e.dst in {n.node_id for n in twin_nodes}],
                      target.views, temporal_of="mini_a")
    graphs["mini_a_t"], containers["mini_a_t"] = twin, container

    rng = np.random.default_rng(3)
    sample = QuerySample(0, rng.standard_normal((2, 2, cfg.feature_dim)),
                         gt_node=np.array([[0, 1], [2, -1]]),
                         gt_category=np.array([[0, 0, ], [0, -1]]))
    item = BatchItem(sample, target, twin, [])

    def loss():
        t, _ = batch_loss_tensor([item], containers, params, cfg,
                                 ALL_MODALITIES, alpha=0.5, tau=0.1)
        return t

    zero_gradients(params)
    loss().backward()
    step = 1e-5
    checked = 0
    worst = 0.0
    coord_rng = np.random.default_rng(0)
    for name in sorted(params):
        tensor = params[name]
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        flat, gflat = tensor.data.reshape(-1), grad.reshape(-1)
        size = flat.size
        coords = range(size) if size <= 64 else coord_rng.choice(size, 16, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            fp = float(loss().data)
            flat[c] = orig - step
            fm = float(loss().data)
            flat[c] = orig
            fd = (fp - fm) / (2 * step)
            err = abs(gflat[c] - fd) / max(abs(fd), abs(gflat[c]), 1e-4)
            worst = max(worst, err)
            assert err <= 1e-4, f"{name}[{c}]: analytic {gflat[c]:.6e} vs fd {fd:.6e}"
            checked += 1
    elapsed = time.monotonic() - started
    report(1, elapsed < 60.0,
           f"{checked} coordinates across {len(params)} tensors, worst rel err "
           f"{worst:.2e} <= 1e-4, runtime {elapsed:.1f}s < 60s")


# -- criterion 2 -------------------------------------------------------------


def test_criterion_2_loss_laws():
    n_p, n_c = 4, 5                      # a = 3 image negatives, b = 4 graph negatives
    dim = n_p + n_c
    patches = np.eye(dim)[:n_p]
    candidates = np.eye(dim)[n_p:]
    pairs = [(i, i) for i in range(3)]
    image_negs = [np.array([j for j in range(n_p) if j != q], dtype=np.intp) for q, _ in pairs]
    graph_negs = [np.array([j for j in range(n_c) if j != v], dtype=np.intp) for _, v in pairs]
    ps = PairSet(pairs=pairs, temporal_pairs=list(pairs),
                 image_negatives=image_negs, graph_negatives=graph_negs,
                 temporal_image_negatives=image_negs, temporal_graph_negatives=graph_negs,
                 static_candidates=[("t", i) for i in range(n_c)],
                 temporal_candidates=[("tt", i) for i in range(n_c)])
    a, b = n_p - 1, n_c - 1
    s = static_loss(ps, patches, candidates, tau=0.1)
    t = temporal_loss(ps, patches, candidates, tau=0.1)
    law_err = abs(s - math.log(1 + a + b))
    alpha = 0.37
    total = alpha * s + (1 - alpha) * t
    exact_total = alpha * s + (1 - alpha) * t
    report(2, law_err <= 1e-9 and s == t and total == exact_total,
           f"uniform-distance loss {s:.12f} vs log(1+{a}+{b})={math.log(1+a+b):.12f} "
           f"(err {law_err:.1e} <= 1e-9); temporal == static exactly; "
           f"total == alpha*static + (1-alpha)*temporal exactly")


# -- criterion 3 -------------------------------------------------------------


@pytest.fixture(scope="module")
def synthetic_world_run(tmp_path_factory):
    """The flagship end-to-end run: generate, train with defaults, evaluate."""
    started = time.monotonic()
    root = tmp_path_factory.mktemp("world") / "ds"
    cfg = SyntheticWorldConfig(seed=20240, scene_count=20, nodes_min=6, nodes_max=10)
    write_dataset(generate_world(cfg), root)
    dataset = load_dataset(root)
    model_cfg = model_config_for_dataset(dataset, seed=0, **DESK_WIDTHS)
    train_cfg = TrainConfig(seed=0)      # alpha 0.5, lr 0.0011, batch 16, tau 0.1, neg 9
    params, curve = train_on_dataset(dataset, model_cfg, train_cfg, ALL_MODALITIES)
    static_db = build_map(dataset, params, model_cfg, ALL_MODALITIES, "static")
    temporal_db = build_map(dataset, params, model_cfg, ALL_MODALITIES, "temporal")
    static_recs = evaluate_queries(dataset.queries["val"], static_db, params, model_cfg,
                                   candidate_size=10, seed=1)
    temporal_recs = evaluate_queries(dataset.queries["val"], temporal_db, params, model_cfg,
                                     candidate_size=10, seed=1,
                                     target_map=temporal_target_map(dataset))
    elapsed = time.monotonic() - started
    return dict(curve=curve, static=static_recs, temporal=temporal_recs, elapsed=elapsed)


def test_criterion_3_end_to_end_localization(synthetic_world_run):
    run = synthetic_world_run
    r1 = recall_at_k(run["static"], 1)
    r5 = recall_at_k(run["static"], 5)
    rt1 = recall_at_k(run["temporal"], 1)
    ratio = run["curve"][-1].total / run["curve"][0].total
    ok = r1 >= 0.90 and r5 == 1.0 and rt1 >= 0.80 and run["elapsed"] <= 600.0
    report(3, ok,
           f"20-scene world, defaults (alpha=0.5, lr=0.0011, batch 16): static R@1 "
           f"{r1:.3f} >= 0.90, R@5 {r5:.3f} == 1.00, temporal R@1 {rt1:.3f} >= 0.80, "
           f"runtime {run['elapsed']:.0f}s <= 600s")
    assert ratio < 0.25, f"final/initial loss ratio {ratio:.3f} not < 0.25"


# -- criterion 4 -------------------------------------------------------------


def test_criterion_4_modality_signal(tmp_path):
    started = time.monotonic()
    cfg = SyntheticWorldConfig(seed=777, scene_count=10, nodes_min=6, nodes_max=6,
                               shared_category_set=True, geometry_signal=False,
                               attribute_signal=False, train_queries_per_scene=10,
                               val_queries_per_scene=4)
    root = tmp_path / "signal_world"
    write_dataset(generate_world(cfg), root)
    dataset = load_dataset(root)
    recalls = {}
    for modalities in (["P"], ["P", "I"]):
        model_cfg = model_config_for_dataset(dataset, seed=0, **DESK_WIDTHS)
        params, _curve = train_on_dataset(dataset, model_cfg, TrainConfig(seed=0), modalities)
        db = build_map(dataset, params, model_cfg, modalities, "static")
        recs = evaluate_queries(dataset.queries["val"], db, params, model_cfg,
                                candidate_size=10, seed=2)
        recalls["".join(modalities)] = recall_at_k(recs, 1)
    elapsed = time.monotonic() - started
    report(4, recalls["PI"] > recalls["P"],
           f"image-only-signal world: R@1({{P,I}}) {recalls['PI']:.3f} > "
           f"R@1({{P}}) {recalls['P']:.3f} ({elapsed:.0f}s)")


# -- criterion 5 -------------------------------------------------------------


def test_criterion_5_index_equivalence():
    rng = np.random.default_rng(19)
    base = rng.standard_normal((990, 400))
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    # plant 10 duplicate vectors under different node ids
    dups = base[:10].copy()
    vectors = np.vstack([base, dups]).astype(np.float32)
    node_ids = np.concatenate([np.arange(1000, 1990), np.arange(10)])  # dups get LOW ids
    index = EmbeddingIndex("big", node_ids, vectors)
    index.build_kdtree()
    mismatches = 0
    for k in range(1000):
        if k < 10:
            q = dups[k] + rng.normal(0, 1e-12, 400)   # exact-tie region
        else:
            q = rng.standard_normal(400)
        bf = index.nn_match(q)
        kd = index.query_kdtree(q)
        if bf != kd:
            mismatches += 1
    tie_ok = all(index.nn_match(dups[k])[0] == k for k in range(10))
    report(5, mismatches == 0 and tie_ok,
           f"1000 queries on a 1000-node scene: kd-tree == brute force on every "
           f"(node_id, delta), planted duplicate ties resolve to the lowest id")


# -- criterion 6 -------------------------------------------------------------


def test_criterion_6_score_bounds_and_monotonicity():
    rng = np.random.default_rng(23)
    violations = 0
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        dim = int(rng.integers(2, 24))
        mat = rng.standard_normal((n, dim))
        mat /= np.linalg.norm(mat, axis=1, keepdims=True)
        index = EmbeddingIndex("s", np.arange(n), mat.astype(np.float32))
        patches = rng.standard_normal((int(rng.integers(1, 8)), dim))
        s_before = scene_score(patches, index).score
        if not 0.0 <= s_before <= 1.0:
            violations += 1
            continue
        extra = rng.standard_normal(dim)
        extra /= np.linalg.norm(extra)
        grown = EmbeddingIndex("s", np.concatenate([np.arange(n), [n]]),
                               np.vstack([mat, extra[None]]).astype(np.float32))
        if scene_score(patches, grown).score < s_before:
            violations += 1
    report(6, violations == 0,
           "1000 randomized trials: scores stayed in [0,1] and never decreased "
           "when a node was added")


# -- criterion 7 -------------------------------------------------------------


def test_criterion_7_encoder_invariances():
    cfg = mini_config()
    params = init_model(cfg)
    rng = np.random.default_rng(31)

    worst_cloud = 0.0
    for _ in range(100):
        cloud = rng.uniform(-1, 1, size=(int(rng.integers(3, 12)), 3))
        base = encode_point_cloud(cloud, params, cfg).data
        perm = rng.permutation(len(cloud))
        dup_row = int(rng.integers(len(cloud)))
        variant = np.vstack([cloud[perm], cloud[dup_row:dup_row + 1]])
        out = encode_point_cloud(variant, params, cfg).data
        worst_cloud = max(worst_cloud, float(np.max(np.abs(out - base))))

    from conftest import look_at_pose

    worst_view = 0.0
    for _ in range(100):
        count = int(rng.integers(1, 6))
        feats = []
        for vid in range(count):
            pose = look_at_pose(rng.uniform([-3, -3, 0.5], [3, 3, 2.0]), [0, 0, 1.0])
            feats.append(ViewFeature(vid, pose, rng.standard_normal((cfg.levels, cfg.feature_dim))))
        base = encode_image_view_sets([feats], params, cfg).data
        perm = rng.permutation(count)
        out = encode_image_view_sets([[feats[i] for i in perm]], params, cfg).data
        worst_view = max(worst_view, float(np.max(np.abs(out - base))))

    from sgloc.scenegraph import Edge, ObjectNode, SceneGraph

    worst_struct = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 7))
        centroids = rng.uniform(-2, 2, size=(n, 3))
        edges_idx = [(i, int(rng.integers(n))) for i in range(n)]
        edges_idx = [(i, j) for i, j in edges_idx if i != j]

        def build(ids):
            nodes = [ObjectNode(ids[i], 0, centroids[i], centroids[i][None],
                                np.zeros(cfg.attr_vocab_size, dtype=np.int64),
                                np.zeros(cfg.rel_vocab_size, dtype=np.int64))
                     for i in range(n)]
            edges = [Edge(ids[i], ids[j], 0) for i, j in edges_idx]
            return SceneGraph("s", "p", ["a"] * cfg.attr_vocab_size,
                              ["r"] * cfg.rel_vocab_size, nodes, edges)

        ids_base = list(range(n))
        relabel = [int(x) for x in rng.permutation(n) * 10 + 5]
        _, out_base = encode_structure(build(ids_base), params, cfg)
        ids_sorted, out_re = encode_structure(build(relabel), params, cfg)
        row_of = {nid: r for r, nid in enumerate(ids_sorted)}
        reordered = np.stack([out_re.data[row_of[relabel[i]]] for i in range(n)])
        worst_struct = max(worst_struct, float(np.max(np.abs(reordered - out_base.data))))

    worst = max(worst_cloud, worst_view, worst_struct)
    report(7, worst <= 1e-6,
           f"100 trials each: cloud perm+dup dev {worst_cloud:.2e}, view perm dev "
           f"{worst_view:.2e}, relabel equivariance dev {worst_struct:.2e} (all <= 1e-6)")


# -- criterion 8 -------------------------------------------------------------


def test_criterion_8_storage_model(tmp_path):
    rng = np.random.default_rng(41)
    scenes = []
    total_nodes = 0
    for i in range(100):
        n = 30
        total_nodes += n
        mat = rng.standard_normal((n, 400))
        mat /= np.linalg.norm(mat, axis=1, keepdims=True)
        scenes.append((f"scene_{i:03d}", np.arange(n), mat.astype(np.float32)))
    path = tmp_path / "map.sgle"
    save_embedding_db(path, 400, scenes)
    payload = total_nodes * 400 * 4
    size = path.stat().st_size
    report(8, payload <= size <= 1.3 * payload,
           f"100-scene x 30-node map: {size} bytes vs payload model {payload} "
           f"bytes (ratio {size / payload:.4f} <= 1.3; paper-scale maps are ~5.4 MB)")


# -- criterion 9 -------------------------------------------------------------

_BENCH_SCRIPT = r"""
import numpy as np, time
from sgloc.retrieval import EmbeddingIndex, MapDatabase, rank_scenes
rng = np.random.default_rng(0)
indexes = []
for i in range(50):
    m = rng.standard_normal((100, 400))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    indexes.append(EmbeddingIndex(f"s{i:02d}", np.arange(100), m.astype(np.float32)))
db = MapDatabase(400, indexes)
q = rng.standard_normal((144, 400))
q /= np.linalg.norm(q, axis=1, keepdims=True)
rank_scenes(q, db, 10)  # warm
times = []
for _ in range(31):
    t0 = time.perf_counter()
    rank_scenes(q, db, 10)
    times.append((time.perf_counter() - t0) * 1e3)
print(f"{np.median(times):.3f}")
"""


def test_criterion_9_timing_envelope():
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1",
               MKL_NUM_THREADS="1")
    out = subprocess.run([sys.executable, "-c", _BENCH_SCRIPT], env=env,
                         capture_output=True, text=True, check=True)
    median_ms = float(out.stdout.strip().splitlines()[-1])
    report(9, median_ms <= 50.0,
           f"144-patch query vs 50 scenes x 100 nodes: median {median_ms:.2f} ms "
           f"single-threaded (31 reps) <= 50 ms")


# -- criterion 10 ------------------------------------------------------------


def _cli(args, cwd):
    return subprocess.run([sys.executable, "-m", "sgloc.cli"] + args,
                          capture_output=True, text=True, cwd=cwd)


def _tree_bytes(root: Path):
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(tmp_path):
    gen_args = ["gen-synthetic", "--scenes", "4", "--nodes-min", "4", "--nodes-max", "5",
                "--category-vocab", "8", "--points-per-node", "48", "--views-per-scene",
                "4", "--feature-dim", "16", "--grid", "4x6", "--train-queries", "3",
                "--val-queries", "2", "--seed", "11"]
    trees = []
    for run in ("a", "b"):
        ds = tmp_path / run / "ds"
        r = _cli(gen_args + ["--out", str(ds)], tmp_path)
        assert r.returncode == 0, r.stderr
        ckpt = tmp_path / run / "model.sglp"
        curve = tmp_path / run / "curve.csv"
        r = _cli(["train", "--dataset", str(ds), "--out-checkpoint", str(ckpt),
                  "--curve", str(curve), "--epochs", "2", "--batch-size", "8",
                  "--negatives", "3", "--seed", "5"], tmp_path)
        assert r.returncode == 0, r.stderr
        db = tmp_path / run / "map.sgle"
        r = _cli(["build-map", "--dataset", str(ds), "--checkpoint", str(ckpt),
                  "--out", str(db)], tmp_path)
        assert r.returncode == 0, r.stderr
        ranks = tmp_path / run / "rankings.jsonl"
        r = _cli(["localize", "--queries", str(ds / "queries" / "val"), "--db", str(db),
                  "--checkpoint", str(ckpt), "--k", "4", "--out", str(ranks)], tmp_path)
        assert r.returncode == 0, r.stderr
        trees.append(_tree_bytes(tmp_path / run))
    same = set(trees[0]) == set(trees[1]) and all(
        trees[0][k] == trees[1][k] for k in trees[0])
    diff = [k for k in trees[0] if trees[0].get(k) != trees[1].get(k)]
    report(10, same,
           "two seeded CLI runs (separate processes): dataset, checkpoint, loss curve, "
           f"embedding database, and rankings byte-identical ({len(trees[0])} files)"
           + (f"; diffs: {diff}" if diff else ""))
