import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import graphs
from mpssm.fastscan import (DiagGso, FastBlockParams, MemoryBudgetError, block_diag_eig, fast_forward,
                            final_state, geometric_power_sum, gso_fingerprint, init_merged_params,
                            precompute_gso_eig, scan_states, to_exact_fast)
from mpssm.graph import build_gso, cycle_graph, disjoint_union, path_graph
from mpssm.model import BlockParams, block_forward, make_input_sequence


@given(st.complex_numbers(max_magnitude=1.2, allow_nan=False, allow_infinity=False), st.integers(0, 40))
def test_geometric_sum_matches_loop(r, count):
    ref = sum(r ** i for i in range(count))
    got = geometric_power_sum(np.array([r]), count)[0]
    assert abs(got - ref) <= 1e-9 * max(1.0, abs(ref))


def test_geometric_sum_at_ratio_one():
    assert geometric_power_sum(np.array([1.0]), 1000)[0] == 1000.0


@given(graphs(min_n=1, max_n=8), st.integers(0, 8), st.integers(0, 10 ** 6))
def test_exact_fast_matches_sequential(g, k, seed):
    gso = build_gso(g)
    p = BlockParams.init(2, 4, 3, k, seed=seed)
    diag = precompute_gso_eig(gso, cache=None)
    fp = to_exact_fast(p)
    seq = make_input_sequence(np.random.default_rng(seed).standard_normal((g.n, 2)), k)
    _, ref = block_forward(gso, p, seq)
    for strategy in ("auto", "scan", "closed"):
        np.testing.assert_allclose(fast_forward(diag, fp, seq, strategy=strategy), ref, atol=1e-8)


def test_scan_prefix_equals_intermediate_states_for_static_input():
    gso = build_gso(cycle_graph(5))
    p = BlockParams.init(2, 3, 2, 4, seed=1)
    diag, fp = precompute_gso_eig(gso, cache=None), to_exact_fast(p)
    seq = make_input_sequence(np.random.default_rng(0).random((5, 2)), 4)
    states, _ = block_forward(gso, p, seq)
    z = scan_states(diag, fp, seq)
    for t in range(5):
        np.testing.assert_allclose(np.real(diag.P @ z[t] @ fp.v_inv), states[t + 1], atol=1e-10)
    np.testing.assert_allclose(z[-1], final_state(diag, fp, seq), atol=1e-10)


def test_temporal_final_output_matches_sequential():
    gso = build_gso(path_graph(6))
    p = BlockParams.init(2, 3, 2, 3, seed=4)
    steps = list(np.random.default_rng(4).standard_normal((4, 6, 2)))
    seq = make_input_sequence(steps, 3)
    _, ref = block_forward(gso, p, seq)
    out = fast_forward(precompute_gso_eig(gso, cache=None), to_exact_fast(p), seq)
    np.testing.assert_allclose(out, ref[-1], atol=1e-10)
    with pytest.raises(ValueError):
        fast_forward(precompute_gso_eig(gso, cache=None), to_exact_fast(p), seq, strategy="closed")


def test_nonsymmetric_w_uses_complex_eigenbasis():
    p = BlockParams.identity_mlp(np.array([[0.0, -0.9], [0.9, 0.0]]), np.eye(2), k=6, activation="identity")
    fp = to_exact_fast(p)
    assert np.iscomplexobj(fp.sigma)
    gso = build_gso(path_graph(4))
    seq = make_input_sequence(np.random.default_rng(0).random((4, 2)), 6)
    _, ref = block_forward(gso, p, seq)
    np.testing.assert_allclose(fast_forward(precompute_gso_eig(gso, cache=None), fp, seq), ref, atol=1e-12)


def test_memory_budget():
    gso = build_gso(path_graph(10))
    fp = init_merged_params(1, 4, 4, 1)
    seq = make_input_sequence(np.ones((10, 1)), 50)
    diag = precompute_gso_eig(gso, cache=None)
    with pytest.raises(MemoryBudgetError):
        fast_forward(diag, fp, seq, strategy="scan", memory_budget=1024)
    # the closed form needs no step tensor
    assert fast_forward(diag, fp, seq, memory_budget=1024).shape == (10, 1)


def test_merged_init_ring():
    fp = init_merged_params(3, 50, 4, 2, r_min=0.5, r_max=0.8, seed=0)
    assert np.all((np.abs(fp.sigma) >= 0.5) & (np.abs(fp.sigma) <= 0.8))
    with pytest.raises(ValueError):
        init_merged_params(1, 2, 2, 1, r_min=0.9, r_max=0.5)
    with pytest.raises(ValueError):
        FastBlockParams(fp.sigma, fp.b_hat, fp.w1_hat, fp.w2, fp.b1, fp.b2, mode="exact")


def test_diag_cache_and_json(tmp_path):
    gso = build_gso(cycle_graph(7))
    cache = {}
    d1 = precompute_gso_eig(gso, cache=cache)
    assert precompute_gso_eig(gso, cache=cache) is d1
    assert d1.fingerprint == gso_fingerprint(gso) != gso_fingerprint(build_gso(path_graph(7)))
    path = tmp_path / "diag.json"
    d1.save(path)
    d2 = DiagGso.load(path)
    np.testing.assert_array_equal(d2.eigenvalues, d1.eigenvalues)
    np.testing.assert_array_equal(d2.P, d1.P)
    assert d2.fingerprint == d1.fingerprint


def test_block_diag_eig_matches_union():
    gs = [path_graph(3), cycle_graph(4)]
    lam, p = block_diag_eig([precompute_gso_eig(build_gso(g), cache=None) for g in gs])
    a = build_gso(disjoint_union(gs)[0]).dense()
    np.testing.assert_allclose(p.toarray() @ np.diag(lam) @ p.toarray().T, a, atol=1e-12)


@pytest.mark.parametrize("strategy", ["closed", "scan"])
def test_merged_mode_stays_finite_for_very_long_recurrences(strategy):
    gso = build_gso(cycle_graph(8))
    fp = init_merged_params(2, 4, 4, 1, r_min=0.999, r_max=1.0, seed=1)
    seq = make_input_sequence(np.random.default_rng(0).random((8, 2)), 5000)
    out = fast_forward(precompute_gso_eig(gso, cache=None), fp, seq, strategy=strategy)
    assert np.all(np.isfinite(out))
