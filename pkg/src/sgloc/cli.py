"""Operator-facing command line: gen-synthetic, build-map, train, localize,
eval, bench.

Exit codes: 0 success, 1 usage error, 2 missing input, 3 numeric failure.
Thread count is applied to the BLAS pools before numpy is imported, so the
heavy imports happen lazily inside the command handlers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_MISSING_INPUT = 2
EXIT_NUMERIC = 3

ALL_MODALITIES = "P,I,S,R,A"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _apply_threads(threads) -> None:
    if threads is None:
        threads = os.environ.get("SGLOC_THREADS")
    if threads is None:
        threads = os.cpu_count() or 1
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(threads)


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        print(f"error: {what} not found: {p}", file=sys.stderr)
        raise SystemExit(EXIT_MISSING_INPUT)
    return p


def _parse_modalities(spec: str):
    keys = [k.strip() for k in spec.split(",") if k.strip()]
    valid = set("PISRA")
    if not keys or any(k not in valid for k in keys):
        print(f"error: bad modality list '{spec}' (use subsets of {ALL_MODALITIES})",
              file=sys.stderr)
        raise SystemExit(EXIT_USAGE)
    return keys


def build_parser() -> _Parser:
    parser = _Parser(prog="sgloc",
                     description="Coarse localization of query images in scene-graph maps")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: logical cores; env SGLOC_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--nodes-min", type=int, default=6)
    p.add_argument("--nodes-max", type=int, default=10)
    p.add_argument("--category-vocab", type=int, default=12)
    p.add_argument("--points-per-node", type=int, default=96)
    p.add_argument("--views-per-scene", type=int, default=6)
    p.add_argument("--feature-dim", type=int, default=48)
    p.add_argument("--grid", default="6x9", help="patch grid as HxW")
    p.add_argument("--train-queries", type=int, default=10)
    p.add_argument("--val-queries", type=int, default=5)
    p.add_argument("--drop-prob", type=float, default=0.1)
    p.add_argument("--jitter-sigma", type=float, default=0.05)
    p.add_argument("--feature-noise", type=float, default=0.10)
    p.add_argument("--no-geometry-signal", action="store_true")
    p.add_argument("--no-attribute-signal", action="store_true")
    p.add_argument("--shared-categories", action="store_true")

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--curve", help="loss curve CSV path")
    p.add_argument("--config", help="flat key=value training config file")
    p.add_argument("--modalities", default=ALL_MODALITIES)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--negatives", type=int, default=None)
    p.add_argument("--model-scale", choices=["desk", "full"], default="desk",
                   help="encoder widths: desk-scale or full-scale")

    p = sub.add_parser("build-map", help="embed scenes into an embedding database")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modalities", default=None,
                   help="override the checkpoint's modality set")
    p.add_argument("--variant", choices=["static", "temporal"], default="static")

    p = sub.add_parser("localize", help="rank scenes for query features")
    p.add_argument("--queries", required=True, help="dataset queries/<split> directory")
    p.add_argument("--db", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True, help="JSON-lines output path")

    p = sub.add_parser("eval", help="retrieval metrics over a dataset split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--candidates", type=int, default=10)
    p.add_argument("--k", default="1,3,5")
    p.add_argument("--variant", choices=["static", "temporal"], default="static")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report-dir", help="write CSV reports here")

    p = sub.add_parser("bench", help="timing report for one query against a map")
    p.add_argument("--dataset", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--repeats", type=int, default=30)
    return parser


DESK_SCALE = dict(point_dim=64, image_dim=96, struct_dim=64, bow_dim=64, joint_dim=192,
                  point_hidden=(32, 64), bow_hidden=64, ff_dim=192, fusion_hidden=256,
                  patch_channels=96, patch_hidden=256)


def cmd_gen_synthetic(args) -> int:
    from .synthetic import SyntheticWorldConfig, generate_world, write_dataset

    try:
        gh, gw = (int(x) for x in args.grid.lower().split("x"))
    except ValueError:
        print(f"error: bad --grid '{args.grid}', expected HxW", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = SyntheticWorldConfig(
            seed=args.seed,
            scene_count=args.scenes,
            nodes_min=args.nodes_min,
            nodes_max=args.nodes_max,
            category_vocab_size=args.category_vocab,
            points_per_node=args.points_per_node,
            views_per_scene=args.views_per_scene,
            feature_dim=args.feature_dim,
            grid_h=gh,
            grid_w=gw,
            train_queries_per_scene=args.train_queries,
            val_queries_per_scene=args.val_queries,
            drop_prob=args.drop_prob,
            jitter_sigma=args.jitter_sigma,
            feature_noise=args.feature_noise,
            geometry_signal=not args.no_geometry_signal,
            attribute_signal=not args.no_attribute_signal,
            shared_category_set=args.shared_categories,
        )
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    write_dataset(generate_world(cfg), args.out)
    print(f"wrote dataset to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataset import load_dataset
    from .pipeline import model_config_for_dataset, save_model, train_on_dataset
    from .training import TrainConfig, TrainingDiverged, parse_train_config, write_curve_csv

    dataset = load_dataset(_require(args.dataset, "dataset"))
    train_cfg = parse_train_config(_require(args.config, "config file")) if args.config \
        else TrainConfig()
    overrides = {
        "alpha": args.alpha, "tau": args.tau, "lr": args.lr,
        "batch_size": args.batch_size, "epochs": args.epochs,
        "negatives_per_sample": args.negatives, "seed": args.seed,
    }
    fields = {k: v for k, v in overrides.items() if v is not None}
    if fields:
        from dataclasses import replace
        train_cfg = replace(train_cfg, **fields)
    modalities = _parse_modalities(args.modalities)
    scale = DESK_SCALE if args.model_scale == "desk" else {}
    model_cfg = model_config_for_dataset(dataset, seed=train_cfg.seed, **scale)
    try:
        params, curve = train_on_dataset(dataset, model_cfg, train_cfg, modalities)
    except TrainingDiverged as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    save_model(args.out_checkpoint, params, model_cfg, train_cfg, modalities)
    if args.curve:
        meta = dict(train_cfg.to_meta(), modalities="".join(modalities))
        write_curve_csv(args.curve, curve, meta)
    print(f"wrote checkpoint to {args.out_checkpoint}"
          + (f" and curve to {args.curve}" if args.curve else ""))
    return EXIT_OK


def cmd_build_map(args) -> int:
    from .dataset import load_dataset
    from .pipeline import build_map, load_model

    dataset = load_dataset(_require(args.dataset, "dataset"))
    params, model_cfg, meta = load_model(_require(args.checkpoint, "checkpoint"))
    modalities = _parse_modalities(args.modalities) if args.modalities \
        else meta.get("modalities", list("PISRA"))
    try:
        db = build_map(dataset, params, model_cfg, modalities, args.variant)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    db.save(args.out)
    print(f"wrote {len(db.indexes)}-scene map to {args.out}")
    return EXIT_OK


def cmd_localize(args) -> int:
    from .dataset import load_query
    from .io import write_rankings_jsonl
    from .pipeline import load_model
    from .fusion import embed_query
    from .retrieval import MapDatabase, rank_scenes

    queries_dir = _require(args.queries, "queries directory")
    db_path = _require(args.db, "embedding database")
    params, model_cfg, _meta = load_model(_require(args.checkpoint, "checkpoint"))
    db = MapDatabase.load(db_path)
    if not db.indexes:
        print("error: embedding database is empty", file=sys.stderr)
        return EXIT_MISSING_INPUT
    paths = sorted(Path(queries_dir).glob("*.json"), key=lambda p: int(p.stem))
    if not paths:
        print(f"error: no query files under {queries_dir}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    rankings = []
    for path in paths:
        sample, _target = load_query(path)
        patches = embed_query(sample, params, model_cfg)
        ranked = rank_scenes(patches, db, args.k)
        rankings.append((sample.image_id, [(s.scene_id, s.score) for s in ranked]))
    write_rankings_jsonl(args.out, rankings)
    print(f"wrote rankings for {len(rankings)} queries to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    import numpy as np

    from .dataset import load_dataset
    from .evaluation import (confusion_matrix, evaluate_queries, patch_accuracy,
                             pearson, recall_at_k, shannon_entropy, storage_report)
    from .pipeline import category_maps, load_model, temporal_target_map
    from .retrieval import MapDatabase

    dataset = load_dataset(_require(args.dataset, "dataset"))
    params, model_cfg, _meta = load_model(_require(args.checkpoint, "checkpoint"))
    db = MapDatabase.load(_require(args.db, "embedding database"))
    queries = dataset.queries.get(args.split)
    if not queries:
        print(f"error: dataset has no '{args.split}' split", file=sys.stderr)
        return EXIT_MISSING_INPUT
    k_values = [int(k) for k in args.k.split(",")]
    target_map = temporal_target_map(dataset) if args.variant == "temporal" else None
    records = evaluate_queries(queries, db, params, model_cfg,
                               candidate_size=args.candidates, seed=args.seed,
                               target_map=target_map, category_maps=category_maps(dataset))

    recalls = {k: recall_at_k(records, k) for k in k_values}
    acc = patch_accuracy(records)
    entropies, ranks = [], []
    for (sample, _t), rec in zip(queries, records):
        try:
            entropies.append(shannon_entropy(sample))
            ranks.append(1.0 if rec.rank == 1 else 0.0)
        except ValueError:
            continue
    try:
        rho = pearson(entropies, ranks)
    except ValueError:
        rho = float("nan")
    n_cat = len({n.category_id for g in dataset.graphs.values() for n in g.nodes})
    confusion = confusion_matrix(records, max(n_cat, 1))
    storage = storage_report(args.db)

    print(f"queries={len(records)} candidates={args.candidates} variant={args.variant}")
    for k in k_values:
        print(f"recall@{k}: {recalls[k]:.4f}")
    print(f"patch_accuracy: {acc:.4f}")
    print(f"entropy_rank_correlation: {rho:.4f}")
    print(f"storage_bytes: {storage.total_bytes} (payload {storage.payload_bytes})")

    if args.report_dir:
        out = Path(args.report_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", encoding="utf-8") as f:
            f.write("metric,value\n")
            for k in k_values:
                f.write(f"recall@{k},{recalls[k]:.6f}\n")
            f.write(f"patch_accuracy,{acc:.6f}\n")
            f.write(f"entropy_rank_correlation,{rho:.6f}\n")
            f.write(f"storage_bytes,{storage.total_bytes}\n")
        np.savetxt(out / "confusion_matrix.csv", confusion, fmt="%d", delimiter=",")
        print(f"wrote reports to {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .dataset import load_dataset
    from .evaluation import timing_report
    from .pipeline import load_model
    from .retrieval import MapDatabase

    dataset = load_dataset(_require(args.dataset, "dataset"))
    params, model_cfg, _meta = load_model(_require(args.checkpoint, "checkpoint"))
    db = MapDatabase.load(_require(args.db, "embedding database"))
    queries = dataset.queries.get(args.split)
    if not queries:
        print(f"error: dataset has no '{args.split}' split", file=sys.stderr)
        return EXIT_MISSING_INPUT
    report = timing_report([s for s, _t in queries], db, params, model_cfg,
                           repeats=args.repeats)
    print(f"repeats: {report.repeats}")
    print(f"embed_ms_median: {report.embed_ms_median:.3f} (var {report.embed_ms_var:.4f})")
    print(f"retrieve_ms_median: {report.retrieve_ms_median:.3f} (var {report.retrieve_ms_var:.4f})")
    return EXIT_OK


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "build-map": cmd_build_map,
    "localize": cmd_localize,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except SystemExit:
        raise
    except FileNotFoundError as err:
        print(f"error: missing input: {err}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (ArithmeticError, FloatingPointError) as err:
        print(f"error: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
