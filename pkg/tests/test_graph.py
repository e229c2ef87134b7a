import numpy as np
import pytest
import scipy.sparse.csgraph as csgraph
from hypothesis import given
from hypothesis import strategies as st

from conftest import graphs
from mpssm.graph import (UNREACHABLE, GppDataset, GppRecord, Graph, GraphError, GraphGenerationError,
                         TemporalDataset, bfs_oracle, bridge_nodes, build_gso, clique_chain,
                         complete_graph, cycle_graph, disjoint_union, gen_gpp_dataset, gen_graph,
                         gen_temporal_dataset, make_gpp_record, path_graph, split_counts)


def test_from_edges_dedups_and_orders():
    g = Graph.from_edges(4, [(1, 0), (0, 1), (2, 3)])
    assert [tuple(e) for e in g.edges] == [(0, 1), (2, 3)]
    assert g.num_edges == 2


@pytest.mark.parametrize("edges", [[(0, 0)], [(0, 5)], [(-1, 2)]])
def test_from_edges_rejects_bad_edges(edges):
    with pytest.raises(GraphError):
        Graph.from_edges(4, edges)


def test_gso_of_k3_is_uniform():
    a = build_gso(complete_graph(3)).dense()
    np.testing.assert_allclose(a, np.full((3, 3), 1 / 3), atol=1e-15)


def test_gso_of_path3_by_hand():
    # degrees with self loop: 2, 3, 2
    a = build_gso(path_graph(3)).dense()
    expect = np.array([[1 / 2, 1 / np.sqrt(6), 0], [1 / np.sqrt(6), 1 / 3, 1 / np.sqrt(6)],
                       [0, 1 / np.sqrt(6), 1 / 2]])
    np.testing.assert_allclose(a, expect, atol=1e-15)


def test_isolated_node_gso_entry_is_one():
    a = build_gso(Graph.from_edges(3, [(0, 1)])).dense()
    assert a[2, 2] == 1.0


@given(graphs())
def test_gso_symmetric_with_matching_sparsity(g):
    a = build_gso(g).dense()
    np.testing.assert_allclose(a, a.T, atol=0)
    pattern = (g.adjacency().toarray() + np.eye(g.n)) > 0
    assert np.array_equal(a != 0, pattern)


@given(graphs(min_n=2, connected=True))
def test_gso_largest_eigenvalue_is_one(g):
    w = np.linalg.eigvalsh(build_gso(g).dense())
    assert abs(w.max() - 1.0) <= 1e-9
    assert w.min() >= -1 - 1e-9


@given(graphs(max_n=15))
def test_bfs_matches_scipy_shortest_paths(g):
    oracle = bfs_oracle(g)
    ref = csgraph.shortest_path(g.adjacency(), unweighted=True)
    finite = np.isfinite(ref)
    assert np.array_equal(oracle.dist[finite], ref[finite].astype(np.int64))
    assert np.all(oracle.dist[~finite] == UNREACHABLE)
    assert oracle.connected == bool(finite.all())
    if oracle.connected:
        assert oracle.diameter == int(ref.max())
        assert np.array_equal(oracle.ecc, ref.max(axis=1).astype(np.int64))


def test_bfs_examples():
    assert bfs_oracle(path_graph(5)).diameter == 4
    assert bfs_oracle(cycle_graph(6)).diameter == 3
    k3 = bfs_oracle(complete_graph(3))
    assert k3.diameter == 1 and list(k3.ecc) == [1, 1, 1]
    two = bfs_oracle(Graph.from_edges(2, []))
    assert two.dist[0, 1] == UNREACHABLE and not two.connected


@given(graphs(min_n=2), st.randoms())
def test_permutation_preserves_distances(g, r):
    perm = list(range(g.n))
    r.shuffle(perm)
    d0 = bfs_oracle(g).dist
    d1 = bfs_oracle(g.permute(perm)).dist
    perm = np.asarray(perm)
    assert np.array_equal(d1[np.ix_(perm, perm)], d0)


def test_clique_chain_shape():
    g = clique_chain(6, 10)
    assert (g.n, g.num_edges) == (65, 280)
    b = bridge_nodes(6, 10)
    assert len(b) == 5
    assert all(g.degrees[v] == 2 for v in b)
    # the marked worst-case pair is 12 hops apart
    assert bfs_oracle(g).dist[b[0], b[-1]] == 12


def test_text_round_trip(tmp_path, small_graph):
    path = tmp_path / "g.txt"
    small_graph.save(path)
    assert path.read_text().splitlines()[0] == f"n {small_graph.n}"
    back = Graph.load(path)
    assert back.fingerprint() == small_graph.fingerprint()


@pytest.mark.parametrize("text", ["", "x 3\n0 1", "n 3\n0 1 2", "n 2\n0 7"])
def test_from_text_rejects_malformed(text):
    with pytest.raises(GraphError):
        Graph.from_text(text)


def test_disjoint_union_offsets():
    u, offsets = disjoint_union([path_graph(3), complete_graph(2)])
    assert u.n == 5 and list(offsets) == [0, 3, 5]
    assert not u.is_connected()
    assert bfs_oracle(u).dist[3, 4] == 1


def test_gen_graph_seeded_and_connected():
    a = gen_graph("erdos_renyi", 3, require_connected=True, n=20, p=0.2)
    b = gen_graph("erdos_renyi", 3, require_connected=True, n=20, p=0.2)
    assert a.fingerprint() == b.fingerprint() and a.is_connected()
    assert gen_graph("tree", 1, n=9).num_edges == 8


def test_gen_graph_gives_up_on_impossible_connectivity():
    with pytest.raises(GraphGenerationError):
        gen_graph("erdos_renyi", 0, require_connected=True, n=30, p=0.0)


def test_split_counts():
    assert split_counts(500, (0.7, 0.15, 0.15)) == [350, 75, 75]
    with pytest.raises(ValueError):
        split_counts(10, (0.5, 0.5, 0.5))


def test_gpp_record_examples(rng):
    rec = make_gpp_record(path_graph(4), "diameter", rng)
    assert rec.targets.tolist() == [3.0]
    assert rec.features.shape == (4, 1) and np.all((rec.features >= 0) & (rec.features < 1))
    sssp = make_gpp_record(path_graph(5), "sssp", rng, source=2)
    assert sssp.targets.tolist() == [2, 1, 0, 1, 2]
    assert sssp.features[:, 1].tolist() == [0, 0, 1, 0, 0]


def test_gpp_dataset_jsonl_round_trip(tmp_path):
    ds = gen_gpp_dataset("eccentricity", 12, seed=4)
    assert all(r.graph.is_connected() and 25 <= r.graph.n <= 35 for r in ds.records)
    path = tmp_path / "d.jsonl"
    ds.save(path)
    lines = path.read_text().splitlines()
    assert len(lines) == 12
    assert set(__import__("json").loads(lines[0])) == {"edges", "features", "targets", "split"}
    back = GppDataset.load(path, "eccentricity")
    for r0, r1 in zip(ds.records, back.records):
        assert r0.graph.fingerprint() == r1.graph.fingerprint() and r0.split == r1.split
        np.testing.assert_array_equal(r0.features, r1.features)
        np.testing.assert_array_equal(r0.targets, r1.targets)


def test_gpp_dataset_deterministic():
    a = gen_gpp_dataset("diameter", 20, seed=9)
    b = gen_gpp_dataset("diameter", 20, seed=9)
    assert [r.to_json() for r in a.records] == [r.to_json() for r in b.records]


def test_gpp_record_json_is_loadable():
    rec = make_gpp_record(cycle_graph(5), "sssp", np.random.default_rng(0))
    back = GppRecord.from_json(rec.to_json())
    assert back.graph.fingerprint() == rec.graph.fingerprint()


def test_temporal_dataset_follows_diffusion():
    g = cycle_graph(6)
    ds = gen_temporal_dataset(g, horizon=2, length=20, seed=0, noise=0.0)
    assert isinstance(ds, TemporalDataset) and len(ds) == 18
    a = build_gso(g).dense()
    np.testing.assert_allclose(ds.signal[1], a @ ds.signal[0], atol=1e-12)
    np.testing.assert_array_equal(ds.targets[0], ds.signal[2])
