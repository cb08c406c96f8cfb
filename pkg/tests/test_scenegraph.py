"""Scene-graph model: visibility oracle, view selection, JSON round-trips."""

import numpy as np
import pytest

from sgloc.scenegraph import (
    CameraView,
    Edge,
    ObjectNode,
    SceneGraph,
    SchemaError,
    compute_view_refs,
    compute_visibility,
    rasterize_depth,
    scene_graph_from_document,
    scene_graph_to_document,
    select_top_views,
)


def make_node(node_id, points, category=0, attr_len=2, rel_len=2):
    pts = np.asarray(points, dtype=float)
    return ObjectNode(
        node_id=node_id,
        category_id=category,
        centroid=pts.mean(axis=0),
        points=pts,
        attributes=np.zeros(attr_len, dtype=np.int64),
        rel_bow=np.zeros(rel_len, dtype=np.int64),
    )


def make_view(view_id=0, width=32, height=24, fx=20.0, fy=20.0):
    # identity pose: camera at origin looking down +z
    return CameraView(view_id, np.eye(4), (fx, fy, width / 2, height / 2), width, height)


def brute_force_counts(view, nodes):
    """Per-pixel oracle: explicit depth comparison over all projected points."""
    fx, fy, cx, cy = view.intrinsics
    best = {}
    for node in nodes:
        cam = node.points @ view.pose[:3, :3].T + view.pose[:3, 3]
        for x, y, z in cam:
            if z <= 1e-9:
                continue
            u, v = int(np.floor(fx * x / z + cx)), int(np.floor(fy * y / z + cy))
            if not (0 <= u < view.width and 0 <= v < view.height):
                continue
            cur = best.get((u, v))
            if cur is None or (z, node.node_id) < cur:
                best[(u, v)] = (z, node.node_id)
    counts = {n.node_id: 0 for n in nodes}
    for z, nid in best.values():
        counts[nid] += 1
    return counts


class TestVisibility:
    def test_behind_camera_is_zero(self):
        node = make_node(1, [[0, 0, -2.0], [0.1, 0, -3.0]])
        assert compute_visibility(node, make_view(), [node]) == 0

    def test_outside_frustum_is_zero(self):
        node = make_node(1, [[100.0, 0, 1.0]])
        assert compute_visibility(node, make_view(), [node]) == 0

    def test_full_occlusion(self):
        rng = np.random.default_rng(0)
        # dense near plane fully covering the sparse far points behind it
        span = np.linspace(-0.4, 0.4, 40)
        gx, gy = np.meshgrid(span, span)
        near = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, 1.0)], axis=1)
        far = np.stack([rng.uniform(-0.2, 0.2, 30), rng.uniform(-0.2, 0.2, 30), np.full(30, 3.0)], axis=1)
        near_node, far_node = make_node(1, near), make_node(2, far)
        view = make_view()
        assert compute_visibility(far_node, view, [near_node, far_node]) == 0
        near_count = compute_visibility(near_node, view, [near_node, far_node])
        assert near_count == brute_force_counts(view, [near_node, far_node])[1]

    def test_matches_per_pixel_oracle(self):
        rng = np.random.default_rng(3)
        nodes = [
            make_node(i, rng.uniform([-1, -1, 0.5], [1, 1, 4.0], size=(60, 3)))
            for i in range(4)
        ]
        view = make_view()
        expected = brute_force_counts(view, nodes)
        for node in nodes:
            assert compute_visibility(node, view, nodes) == expected[node.node_id]

    def test_depth_tie_goes_to_lower_id(self):
        p = [[0.0, 0.0, 2.0]]
        a, b = make_node(5, p), make_node(9, p)
        view = make_view()
        assert compute_visibility(a, view, [a, b]) == 1
        assert compute_visibility(b, view, [a, b]) == 0

    def test_monotone_under_occluder_removal(self):
        rng = np.random.default_rng(11)
        nodes = [
            make_node(i, rng.uniform([-1, -1, 0.5], [1, 1, 4.0], size=(40, 3)))
            for i in range(5)
        ]
        view = make_view()
        for node in nodes:
            with_all = compute_visibility(node, view, nodes)
            alone = compute_visibility(node, view, [node])
            assert alone >= with_all


class TestSelectTopViews:
    def graph_with_views(self, n_views=4):
        rng = np.random.default_rng(1)
        node = make_node(0, rng.uniform([-0.5, -0.5, 1.0], [0.5, 0.5, 2.0], size=(80, 3)))
        views = [make_view(view_id=i, width=16 + 8 * i, height=16 + 8 * i) for i in range(n_views)]
        graph = SceneGraph("s", "p", ["a", "b"], ["r", "q"], [node], [], views)
        compute_view_refs(graph)
        return graph

    def test_counts_non_increasing_and_truncated(self):
        graph = self.graph_with_views()
        node = graph.nodes[0]
        top = select_top_views(node, graph.views, 2)
        assert len(top) == 2
        assert top[0][1] >= top[1][1]

    def test_fewer_views_than_k(self):
        graph = self.graph_with_views()
        node = graph.nodes[0]
        top = select_top_views(node, graph.views, 10)
        assert len(top) == len([c for _, c in node.view_refs if c > 0])
        counts = [c for _, c in top]
        assert counts == sorted(counts, reverse=True)

    def test_tie_breaks_to_lower_view_id(self):
        node = make_node(0, [[0.0, 0.0, 1.0]])
        node.view_refs = [(3, 7), (1, 7), (2, 9)]
        views = [make_view(view_id=i) for i in range(4)]
        assert select_top_views(node, views, 3) == [(2, 9), (1, 7), (3, 7)]

    def test_zero_visibility_never_selected(self):
        node = make_node(0, [[0.0, 0.0, 1.0]])
        node.view_refs = [(0, 0), (1, 5)]
        views = [make_view(view_id=0), make_view(view_id=1)]
        assert select_top_views(node, views, 10) == [(1, 5)]

    def test_k_must_be_positive(self):
        node = make_node(0, [[0.0, 0.0, 1.0]])
        with pytest.raises(ValueError):
            select_top_views(node, [], 0)


def tiny_graph():
    rng = np.random.default_rng(5)
    nodes = [
        make_node(0, rng.uniform([-1, -1, 1], [1, 1, 3], size=(10, 3)), category=2),
        make_node(4, rng.uniform([-1, -1, 1], [1, 1, 3], size=(7, 3)), category=1),
    ]
    nodes[0].attributes = np.array([1, 0], dtype=np.int64)
    nodes[1].rel_bow = np.array([0, 3], dtype=np.int64)
    edges = [Edge(0, 4, 1)]
    views = [make_view(view_id=2)]
    return SceneGraph("scene_a", "place_a", ["wood", "red"], ["near", "on"], nodes, edges, views)


class TestGraphInvariants:
    def test_duplicate_node_ids_rejected(self):
        n1, n2 = make_node(1, [[0, 0, 1]]), make_node(1, [[0, 0, 2]])
        with pytest.raises(ValueError, match="duplicate"):
            SceneGraph("s", "p", [], ["r"], [n1, n2], [])

    def test_dangling_edge_rejected(self):
        n = make_node(1, [[0, 0, 1]])
        with pytest.raises(ValueError, match="missing node 99"):
            SceneGraph("s", "p", [], ["r"], [n], [Edge(1, 99, 0)])

    def test_self_loop_rejected(self):
        n = make_node(1, [[0, 0, 1]])
        with pytest.raises(ValueError, match="self-loop"):
            SceneGraph("s", "p", [], ["r"], [n], [Edge(1, 1, 0)])

    def test_relation_outside_vocab_rejected(self):
        n1, n2 = make_node(1, [[0, 0, 1]]), make_node(2, [[0, 0, 2]])
        with pytest.raises(ValueError, match="relation_id"):
            SceneGraph("s", "p", [], ["r"], [n1, n2], [Edge(1, 2, 3)])


class TestSerialization:
    def test_round_trip_preserves_graph(self):
        graph = tiny_graph()
        doc = scene_graph_to_document(graph)
        clouds = {n.node_id: n.points for n in graph.nodes}
        back = scene_graph_from_document(doc, clouds)
        assert back.scene_id == graph.scene_id
        assert back.place_id == graph.place_id
        assert back.attribute_vocab == graph.attribute_vocab
        assert [n.node_id for n in back.nodes] == [0, 4]
        for a, b in zip(sorted(graph.nodes, key=lambda n: n.node_id), back.nodes):
            assert np.array_equal(a.points, b.points)
            assert np.array_equal(a.attributes, b.attributes)
            assert np.array_equal(a.rel_bow, b.rel_bow)
            assert np.allclose(a.centroid, b.centroid)
        assert back.edges == graph.edges
        assert len(back.views) == 1
        assert np.array_equal(back.views[0].pose, graph.views[0].pose)

    def test_document_round_trip_is_identity(self):
        graph = tiny_graph()
        doc = scene_graph_to_document(graph)
        clouds = {n.node_id: n.points for n in graph.nodes}
        assert scene_graph_to_document(scene_graph_from_document(doc, clouds)) == doc

    def test_empty_nodes_rejected(self):
        doc = scene_graph_to_document(tiny_graph())
        doc["nodes"] = []
        with pytest.raises(SchemaError, match="nodes: must be non-empty"):
            scene_graph_from_document(doc, {})

    def test_edge_to_missing_node_named_in_error(self):
        graph = tiny_graph()
        doc = scene_graph_to_document(graph)
        doc["edges"].append({"src": 0, "dst": 99, "relation_id": 0})
        clouds = {n.node_id: n.points for n in graph.nodes}
        with pytest.raises(SchemaError, match="missing node 99"):
            scene_graph_from_document(doc, clouds)

    def test_schema_errors_carry_paths(self):
        graph = tiny_graph()
        doc = scene_graph_to_document(graph)
        clouds = {n.node_id: n.points for n in graph.nodes}
        bad = {**doc, "nodes": [{**doc["nodes"][0], "centroid": [1.0, 2.0]}] + doc["nodes"][1:]}
        with pytest.raises(SchemaError, match=r"nodes\[0\].centroid"):
            scene_graph_from_document(bad, clouds)
        bad = {**doc, "nodes": [{**doc["nodes"][0], "attributes": [1, -2]}] + doc["nodes"][1:]}
        with pytest.raises(SchemaError, match=r"nodes\[0\].attributes\[1\]"):
            scene_graph_from_document(bad, clouds)

    def test_missing_point_payload_rejected(self):
        graph = tiny_graph()
        doc = scene_graph_to_document(graph)
        with pytest.raises(SchemaError, match="no point cloud payload"):
            scene_graph_from_document(doc, {0: graph.nodes[0].points})


class TestRasterizeShared:
    def test_owner_map_partitions_pixels(self):
        rng = np.random.default_rng(8)
        nodes = [
            make_node(i, rng.uniform([-1, -1, 0.5], [1, 1, 4.0], size=(50, 3)))
            for i in range(3)
        ]
        view = make_view()
        owner = rasterize_depth(view, nodes)
        total_owned = int(np.count_nonzero(owner >= 0))
        assert total_owned == sum(compute_visibility(n, view, nodes) for n in nodes)
