import math

import numpy as np
import pytest

from stgt import graph as gr
from stgt.errors import ValidationError

from oracles import (betweenness_enum, closeness_enum, clustering_enum, degree_enum, law_of_cosines_km,
                     pagerank_dense, random_graph)


def test_distance_identity_and_antipode():
    assert gr.great_circle_km((35.0, -97.0), (35.0, -97.0)) == 0.0
    assert gr.great_circle_km((0.0, 0.0), (0.0, 180.0)) == pytest.approx(math.pi * 6371.0, abs=1e-6)
    assert gr.great_circle_km((0.0, 0.0), (0.0, 180.0)) == pytest.approx(20015.1, abs=0.1)


def test_distance_matches_law_of_cosines():
    a, b = (35.0, -97.0), (36.0, -97.0)
    assert abs(gr.great_circle_km(a, b) - law_of_cosines_km(a, b)) < 0.1


def test_pairwise_matches_scalar_distance():
    rng = np.random.default_rng(0)
    coords = np.column_stack([rng.uniform(30, 40, 6), rng.uniform(-100, -90, 6)])
    d = gr.pairwise_km(coords)
    for i in range(6):
        for j in range(6):
            assert d[i, j] == pytest.approx(gr.great_circle_km(coords[i], coords[j]), abs=1e-9)


def test_invalid_coordinates_rejected():
    with pytest.raises(ValidationError):
        gr.great_circle_km((91.0, 0.0), (0.0, 0.0))
    with pytest.raises(ValidationError):
        gr.pairwise_km(np.array([[0.0, np.nan], [1.0, 1.0]]))


def _two_points_km_apart(km):
    # along a meridian, 1 degree of latitude = R * pi / 180 km
    return np.array([[35.0, -97.0], [35.0 + km / (6371.0 * math.pi / 180.0), -97.0]])


def test_adjacency_threshold_is_strict():
    coords = _two_points_km_apart(5.0)
    assert gr.build_adjacency(coords, tau=10.0).adjacency[0, 1] == 1
    assert gr.build_adjacency(coords, tau=gr.pairwise_km(coords)[0, 1]).adjacency[0, 1] == 0


def test_adjacency_matches_pairwise_oracle():
    rng = np.random.default_rng(1)
    coords = np.column_stack([rng.uniform(35, 36, 6), rng.uniform(-98, -97, 6)])
    g = gr.build_adjacency(coords, tau=60.0)
    for i in range(6):
        for j in range(6):
            expect = 1 if i == j else int(gr.great_circle_km(coords[i], coords[j]) < 60.0)
            assert g.adjacency[i, j] == expect


def test_pagerank_symmetric_cases():
    k5 = gr.graph_from_adjacency(np.ones((5, 5)))
    np.testing.assert_allclose(gr.pagerank(k5), 0.2, atol=1e-12)
    pair = gr.graph_from_adjacency(np.ones((2, 2)))
    np.testing.assert_allclose(gr.pagerank(pair), 0.5, atol=1e-12)


def test_pagerank_star_matches_linear_solve():
    a = np.eye(4, dtype=int)
    a[0, 1:] = a[1:, 0] = 1
    np.testing.assert_allclose(gr.pagerank(gr.graph_from_adjacency(a)), pagerank_dense(a), atol=1e-10)


def test_betweenness_path_and_complete():
    path = np.eye(3, dtype=int)
    path[0, 1] = path[1, 0] = path[1, 2] = path[2, 1] = 1
    np.testing.assert_allclose(gr.betweenness(gr.graph_from_adjacency(path)), [0, 1, 0])
    np.testing.assert_allclose(gr.betweenness(gr.graph_from_adjacency(np.ones((4, 4)))), 0.0)


def test_star_and_triangle_descriptors():
    star = np.eye(4, dtype=int)
    star[0, 1:] = star[1:, 0] = 1
    g = gr.graph_from_adjacency(star)
    assert gr.degree(g)[0] == 3
    assert gr.clustering(g)[0] == 0
    tri = gr.graph_from_adjacency(np.ones((3, 3)))
    np.testing.assert_allclose(gr.clustering(tri), 1.0)
    np.testing.assert_allclose(gr.closeness(tri), 0.5)


def test_path_closeness():
    path = np.eye(3, dtype=int)
    path[0, 1] = path[1, 0] = path[1, 2] = path[2, 1] = 1
    np.testing.assert_allclose(gr.closeness(gr.graph_from_adjacency(path)), [1 / 3, 1 / 2, 1 / 3])


def test_isolated_node_descriptors_are_finite():
    a = np.eye(3, dtype=int)
    a[0, 1] = a[1, 0] = 1
    f = gr.topo_feature_vector(gr.graph_from_adjacency(a))
    assert f.closeness[2] == 0.0 and f.degree[2] == 0.0
    assert np.isfinite(f.matrix()).all()
    assert f.pagerank.sum() == pytest.approx(1.0)


def test_all_descriptors_match_enumeration_on_random_graphs():
    rng = np.random.default_rng(2)
    for _ in range(30):
        n = int(rng.integers(2, 8))
        a = random_graph(rng, n, rng.uniform(0.2, 0.8))
        f = gr.topo_feature_vector(gr.graph_from_adjacency(a))
        np.testing.assert_allclose(f.degree, degree_enum(a), atol=1e-12)
        np.testing.assert_allclose(f.betweenness, betweenness_enum(a), atol=1e-12)
        np.testing.assert_allclose(f.closeness, closeness_enum(a), atol=1e-12)
        np.testing.assert_allclose(f.clustering, clustering_enum(a), atol=1e-12)
        np.testing.assert_allclose(f.pagerank, pagerank_dense(a), atol=1e-9)


def test_graph_from_adjacency_validation():
    with pytest.raises(ValidationError):
        gr.graph_from_adjacency(np.array([[1, 1], [0, 1]]))
    with pytest.raises(ValidationError):
        gr.build_adjacency(np.zeros((1, 2)))


def test_edge_and_node_csv_round_trip(tmp_path):
    a = np.eye(4, dtype=int)
    a[0, 1] = a[1, 0] = a[2, 3] = a[3, 2] = 1
    ids = ("A", "B", "C", "D")
    g = gr.graph_from_adjacency(a, ids=ids)
    gr.write_edges_csv(g, tmp_path / "edges.csv")
    np.testing.assert_array_equal(gr.read_edges_csv(tmp_path / "edges.csv", ids), a)
    gr.write_node_features_csv(g, gr.topo_feature_vector(g), tmp_path / "nodes.csv")
    lines = (tmp_path / "nodes.csv").read_text().splitlines()
    assert lines[0] == "node,degree,betweenness,closeness,pagerank,clustering"
    assert len(lines) == 5
