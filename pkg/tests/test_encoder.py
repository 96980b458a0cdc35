import numpy as np
import pytest

from causalgcl.encoder import ViewAdjacency, encode_views, export_embeddings, propagate, propagate_backward
from causalgcl.errors import ShapeError
from causalgcl.graph import BipartiteGraph, normalize_adjacency
from causalgcl.numerics import ParameterSet

from helpers import random_graph


def test_single_edge_one_layer():
    g = BipartiteGraph(1, 1, np.array([[0, 0, 0]]))
    x = np.array([[1.0, 2.0], [3.0, -4.0]])
    h = propagate(normalize_adjacency(g), x, 1)
    # each node averages itself with its only neighbour
    np.testing.assert_allclose(h[0], (x[0] + x[1]) / 2)
    np.testing.assert_allclose(h[1], (x[0] + x[1]) / 2)


def test_zero_layers_is_identity():
    g = BipartiteGraph(2, 2, np.array([[0, 1, 0]]))
    x = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(propagate(normalize_adjacency(g), x, 0), x)


def test_matches_dense_power_sum():
    rng = np.random.default_rng(1)
    for _ in range(10):
        g = random_graph(rng)
        a = normalize_adjacency(g)
        x = rng.standard_normal((g.num_nodes, 4))
        L = int(rng.integers(0, 4))
        dense = a.toarray()
        expect = sum(np.linalg.matrix_power(dense, l) @ x for l in range(L + 1)) / (L + 1)
        np.testing.assert_allclose(propagate(a, x, L), expect, atol=1e-12)


def test_backward_is_adjoint():
    rng = np.random.default_rng(2)
    for _ in range(10):
        g = random_graph(rng)
        a = normalize_adjacency(g)
        L = int(rng.integers(1, 4))
        x = rng.standard_normal((g.num_nodes, 3))
        y = rng.standard_normal((g.num_nodes, 3))
        lhs = np.sum(propagate(a, x, L) * y)
        rhs = np.sum(x * propagate_backward(a, L, y))
        assert abs(lhs - rhs) < 1e-10


def test_bad_inputs():
    a = normalize_adjacency(BipartiteGraph(1, 1, np.array([[0, 0, 0]])))
    with pytest.raises(ValueError):
        propagate(a, np.zeros((2, 2)), -1)
    with pytest.raises(ShapeError):
        propagate(a, np.zeros((3, 2)), 1)


def test_views_share_table():
    g = BipartiteGraph(2, 2, np.array([[0, 0, 0], [1, 1, 0], [0, 1, 0]]))
    g_c = g.with_edges(g.edges[:2])
    g_s = g.with_edges(g.edges[2:])
    p = ParameterSet.init(4, 3, seed=0)
    v = encode_views(g, g_c, g_s, p, 2)
    np.testing.assert_allclose(v.causal, propagate(normalize_adjacency(g_c), p.embedding, 2))
    np.testing.assert_allclose(v.spurious, propagate(normalize_adjacency(g_s), p.embedding, 2))
    adj = ViewAdjacency.from_graphs(g, g_c, g_s)
    assert adj.spurious_degree.tolist() == [1, 0, 0, 1]
    with pytest.raises(ShapeError):
        ViewAdjacency.from_graphs(g, BipartiteGraph(3, 2, g.edges), g_s)


def test_export(tmp_path):
    h = np.array([[0.5, 1.0], [2.0, -1.0]])
    export_embeddings(h, tmp_path / "h.tsv")
    assert (tmp_path / "h.tsv").read_text().splitlines() == ["0\t0.5\t1.0", "1\t2.0\t-1.0"]
