"""sgloc-extract: images + scene graphs -> one feature container.

Expected layout:
  --graphs DIR   scene documents <scene_id>.json; point-cloud containers are
                 found next to them (<scene_id>.sglf) or under ../features/.
  --images DIR   <scene_id>/view_<view_id>.png for mapped views and
                 <scene_id>/query_<image_id>.png for query images.

Emits view-level records for the top --kview views of every node plus a patch
grid per query image, and a <out>.meta.json sidecar recording the backbone.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backbone import load_image, make_backbone
from .container import KIND_PATCH_GRID, KIND_VIEW_LEVELS, ContainerWriter
from .extract import extract_query_features, extract_view_level_features
from .projection import compute_crop_boxes, load_scene, top_views


def build_parser():
    parser = argparse.ArgumentParser(prog="sgloc-extract",
                                     description="Extract backbone features into a container")
    parser.add_argument("--images", required=True)
    parser.add_argument("--graphs", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--levels", type=int, default=3)
    parser.add_argument("--kview", type=int, default=10)
    parser.add_argument("--expand", type=float, default=0.2,
                        help="per-level crop growth as a fraction of the base box")
    parser.add_argument("--backbone", default="builtin")
    parser.add_argument("--feature-dim", type=int, default=384)
    parser.add_argument("--patch", type=int, default=14)
    parser.add_argument("--resize", default="224x126", help="query resize as WIDTHxHEIGHT")
    parser.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    graphs_dir = Path(args.graphs)
    images_dir = Path(args.images)
    if not graphs_dir.is_dir():
        print(f"error: graphs directory not found: {graphs_dir}", file=sys.stderr)
        return 2
    if not images_dir.is_dir():
        print(f"error: images directory not found: {images_dir}", file=sys.stderr)
        return 2
    try:
        width, height = (int(x) for x in args.resize.lower().split("x"))
    except ValueError:
        print(f"error: bad --resize '{args.resize}'", file=sys.stderr)
        return 1

    backbone = make_backbone(args.backbone, args.feature_dim, args.patch, args.seed)
    n_views = n_queries = 0
    with ContainerWriter(args.out, backbone.feature_dim) as writer:
        for doc_path in sorted(graphs_dir.glob("*.json")):
            scene = load_scene(doc_path)
            scene_images = images_dir / scene.scene_id
            if not scene_images.is_dir():
                continue
            view_image = {}
            for view in scene.views:
                path = scene_images / f"view_{view.view_id}.png"
                if path.exists():
                    view_image[view.view_id] = load_image(path)
            views_by_id = {v.view_id: v for v in scene.views}
            for node_id in sorted(scene.node_points):
                for view_id, _count in top_views(scene, node_id, args.kview):
                    if view_id not in view_image:
                        continue
                    spec = compute_crop_boxes(scene, node_id, views_by_id[view_id],
                                              args.levels, args.expand)
                    levels = extract_view_level_features(view_image[view_id], spec, backbone)
                    writer.add(KIND_VIEW_LEVELS, node_id, view_id, levels)
                    n_views += 1
            for query_path in sorted(scene_images.glob("query_*.png")):
                image_id = int(query_path.stem.split("_", 1)[1])
                grid = extract_query_features(load_image(query_path), backbone,
                                              resize=(width, height))
                writer.add(KIND_PATCH_GRID, image_id, 0, grid)
                n_queries += 1

    meta = dict(backbone.describe(), levels=args.levels, kview=args.kview,
                expand=args.expand, resize=[width, height])
    Path(f"{args.out}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    print(f"wrote {n_views} view records and {n_queries} query grids to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
