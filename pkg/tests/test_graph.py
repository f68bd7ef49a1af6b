import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stgcast.errors import ContractError, DegenerateGraphError, NoOverlapError, ParseError
from stgcast.graph import (
    DetectorGraph,
    degree_vector,
    khop_clipped_adjacency,
    load_adjacency_csv,
    normalized_adjacency,
    prune_to_detectors,
    ring_graph,
    spectral_radius,
    symmetric_normalize,
    write_adjacency_csv,
)

from oracles import brute_khop, brute_normalize


def random_graph(rng, n, p=0.35):
    upper = np.triu(rng.uniform(size=(n, n)) < p, 1).astype(float)
    return DetectorGraph(tuple(f"n{i}" for i in range(n)), upper + upper.T)


def path(n):
    a = np.zeros((n, n))
    for i in range(n - 1):
        a[i, i + 1] = a[i + 1, i] = 1
    return DetectorGraph(tuple("abcdefghij"[:n]), a)


def test_khop_examples():
    assert np.array_equal(khop_clipped_adjacency(path(2), 1), np.ones((2, 2)))
    assert np.array_equal(khop_clipped_adjacency(path(3), 2), np.ones((3, 3)))
    g = DetectorGraph(("a", "b", "c"), np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]]))
    assert np.array_equal(khop_clipped_adjacency(g, 1)[2], [0, 0, 1])
    with pytest.raises(ContractError):
        khop_clipped_adjacency(path(3), 0)


def test_degree_examples():
    assert np.array_equal(degree_vector(np.ones((2, 2))), [2, 2])
    assert np.array_equal(degree_vector(np.eye(3)), [1, 1, 1])
    assert np.array_equal(degree_vector(khop_clipped_adjacency(path(3), 1)), [2, 3, 2])
    with pytest.raises(ContractError):
        degree_vector(np.array([[1.0, -1.0], [-1.0, 1.0]]))


def test_normalize_examples():
    assert np.array_equal(symmetric_normalize(np.ones((2, 2))).matrix, np.full((2, 2), 0.5))
    assert np.array_equal(symmetric_normalize(np.eye(3)).matrix, np.eye(3))
    at = khop_clipped_adjacency(path(3), 1)
    assert np.allclose(symmetric_normalize(at).matrix, brute_normalize(at.tolist()), rtol=0, atol=1e-15)
    with pytest.raises(DegenerateGraphError):
        symmetric_normalize(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_random_graphs_match_oracle():
    rng = np.random.default_rng(7)
    for trial in range(50):
        n = int(rng.integers(1, 11))
        g = random_graph(rng, n)
        k = int(rng.integers(1, 4))
        at = khop_clipped_adjacency(g, k)
        assert np.array_equal(at, brute_khop(g.adjacency.tolist(), k))
        ah = normalized_adjacency(g, k).matrix
        assert np.abs(ah - brute_normalize(at.tolist())).max() <= 1e-12
        assert spectral_radius(ah) <= 1 + 1e-9


@given(st.integers(1, 20), st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_normalized_invariants(n, seed, k):
    g = random_graph(np.random.default_rng(seed), n)
    at = khop_clipped_adjacency(g, k)
    ah = normalized_adjacency(g, k).matrix
    assert np.array_equal(ah, ah.T)
    assert (ah >= 0).all() and (ah <= 1).all()
    assert np.allclose(np.diag(ah), 1.0 / at.sum(axis=1), rtol=0, atol=1e-15)
    assert spectral_radius(ah) <= 1 + 1e-9
    nxt = khop_clipped_adjacency(g, k + 1)
    assert (at <= nxt).all()
    assert np.array_equal(np.diag(at), np.ones(n))


def test_khop_fixed_point_on_connected_graph():
    g = ring_graph(8)
    assert np.array_equal(khop_clipped_adjacency(g, 4), np.ones((8, 8)))
    assert np.array_equal(khop_clipped_adjacency(g, 7), np.ones((8, 8)))


def test_prune_examples():
    g = path(3)
    r = prune_to_detectors(g, ["b", "c"])
    assert r.graph.node_ids == ("b", "c")
    assert np.array_equal(r.graph.adjacency, g.adjacency[1:, 1:])
    assert r.dropped == ("a",) and r.missing == ()
    same = prune_to_detectors(g, g.node_ids)
    assert same.graph.node_ids == g.node_ids and np.array_equal(same.graph.adjacency, g.adjacency)
    with pytest.raises(NoOverlapError):
        prune_to_detectors(g, ["x", "y"])


def test_prune_90_to_87():
    rng = np.random.default_rng(3)
    g = random_graph(rng, 90, p=0.05)
    data = list(g.node_ids[:87])
    rng.shuffle(data)
    r = prune_to_detectors(g, data)
    assert r.graph.adjacency.shape == (87, 87)
    assert len(r.dropped) == 3
    assert list(r.graph.node_ids) == data  # data order kept


def test_prune_reports_missing():
    r = prune_to_detectors(path(3), ["c", "zz", "a"])
    assert r.missing == ("zz",)
    assert r.graph.node_ids == ("c", "a")


def test_normalize_after_prune_matches_submatrix(rng):
    g = random_graph(rng, 12, p=0.4)
    keep = [g.node_ids[i] for i in (5, 0, 9, 3)]
    pruned = prune_to_detectors(g, keep).graph
    idx = [g.node_ids.index(i) for i in keep]
    sub = g.adjacency[np.ix_(idx, idx)]
    expect = brute_normalize(brute_khop(sub.tolist(), 1).tolist())
    assert np.allclose(normalized_adjacency(pruned).matrix, expect, rtol=0, atol=1e-12)


def test_graph_validation():
    with pytest.raises(ContractError):
        DetectorGraph(("a", "b"), np.array([[0, 1], [0, 0]]))
    with pytest.raises(ContractError):
        DetectorGraph(("a", "a"), np.zeros((2, 2)))
    with pytest.raises(ContractError):
        DetectorGraph(("a", "b"), np.array([[0, 2], [2, 0]]))
    g = path(3)
    with pytest.raises(ValueError):
        g.adjacency[0, 0] = 1


def test_from_matrix_binarizes_and_symmetrizes(caplog):
    with caplog.at_level(logging.INFO, logger="stgcast.graph"):
        g = DetectorGraph.from_matrix(["a", "b", "c"], [[0, 0.4, 0], [0, 0, 1], [0, 0, 0]])
    assert np.array_equal(g.adjacency, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    assert "nonbinary" in caplog.text and "asymmetric" in caplog.text


def test_adjacency_csv_roundtrip(tmp_path):
    g = ring_graph(5)
    p = tmp_path / "adj.csv"
    write_adjacency_csv(g, p)
    back = load_adjacency_csv(p)
    assert back.node_ids == g.node_ids and np.array_equal(back.adjacency, g.adjacency)


def test_adjacency_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text(",a,b\na,0,1\nb,1\n")
    with pytest.raises(ParseError) as info:
        load_adjacency_csv(p)
    assert info.value.line == 3
    p.write_text(",a,b\na,0,x\nb,1,0\n")
    with pytest.raises(ParseError):
        load_adjacency_csv(p)
    p.write_text(",a,b\nb,0,1\na,1,0\n")
    with pytest.raises(ParseError):
        load_adjacency_csv(p)


def test_ring_graph_names():
    g = ring_graph(12)
    assert g.node_ids[0] == "D000" and g.node_ids[-1] == "D011"
    assert g.adjacency.sum() == 24
