import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpssm.fastscan import to_exact_fast
from mpssm.graph import GppDataset, GppRecord, cycle_graph, gen_gpp_dataset, path_graph
from mpssm.model import predict
from mpssm.train import (ARCHITECTURES, AblationResult, AdamState, BatchBuilder, TrainConfig,
                         adam_step, analytic_gradients, build_model, evaluate, gradient_check,
                         log10_mse, loss_and_grads, train_model)


@pytest.fixture(scope="module")
def tiny_dataset():
    return gen_gpp_dataset("diameter", 24, seed=0)


def record(graph, task_targets, seed=0):
    x = np.random.default_rng(seed).random((graph.n, 1))
    return GppRecord(graph, x, np.asarray(task_targets, dtype=float), "train")


@pytest.mark.parametrize("arch", ARCHITECTURES)
@pytest.mark.parametrize("pooling", ["mean", "none"])
def test_gradients_match_finite_differences(arch, pooling):
    cfg = TrainConfig(architecture=arch, k=2, hidden=3, blocks=2, mlp_hidden=3)
    model = build_model(cfg, 2, 1, pooling)
    g = cycle_graph(5)
    x = np.random.default_rng(1).random((5, 2))
    y = np.arange(5.0) if pooling == "none" else np.array([2.0])
    errors = gradient_check(model, g, x, y)
    assert max(errors.values()) < 1e-4, errors


def test_fast_merged_gradients_match_finite_differences():
    cfg = TrainConfig(implementation="fast-merged", k=3, hidden=3, blocks=2)
    model = build_model(cfg, 1, 1, "mean")
    errors = gradient_check(model, path_graph(6), np.random.default_rng(2).random((6, 1)), np.array([1.5]))
    assert any(k.endswith(".im") for k in errors)
    assert max(errors.values()) < 1e-4, errors


def test_exact_fast_gradients_agree_with_sequential_on_shared_parameters():
    cfg = TrainConfig(k=3, hidden=3, blocks=1)
    seq_model = build_model(cfg, 1, 1, "mean")
    fast_model = build_model(TrainConfig(k=3, hidden=3, blocks=1, implementation="fast-merged"), 1, 1, "mean")
    # load the exact diagonalization of the sequential block into the merged parameters
    fp = to_exact_fast(seq_model.block(0))
    p = fast_model.params
    for name in p:
        if name in seq_model.params:
            p[name] = seq_model.params[name].copy()
    p["block0.sigma"] = fp.sigma.astype(complex)
    p["block0.b_hat"] = fp.b_hat.astype(complex)
    p["block0.w1_hat"] = fp.w1_hat.astype(complex)
    g, x, y = cycle_graph(6), np.random.default_rng(3).random((6, 1)), np.array([3.0])
    np.testing.assert_allclose(predict(fast_model, g, x), predict(seq_model, g, x), atol=1e-10)
    _, gs = analytic_gradients(seq_model, g, x, y)
    _, gf = analytic_gradients(fast_model, g, x, y)
    for name in ("enc.w", "enc.b", "head.w", "head.b", "block0.W2", "block0.b1", "block0.b2",
                 "norm0.gamma", "norm0.beta"):
        scale = max(np.abs(gs[name]).max(), 1e-8)
        assert np.abs(gs[name] - gf[name]).max() / scale < 1e-3, name


def test_zero_residual_gives_zero_gradients():
    model = build_model(TrainConfig(k=2, hidden=3), 1, 1, "mean")
    g, x = path_graph(4), np.ones((4, 1))
    y = np.ravel(predict(model, g, x))
    loss, grads = analytic_gradients(model, g, x, y)
    assert loss == 0.0 and all(np.all(v == 0) for v in grads.values())


def test_gradients_scale_with_loss_weight():
    model = build_model(TrainConfig(k=2, hidden=3), 1, 1, "mean")
    batch = BatchBuilder(False)([record(path_graph(4), [2.0])])
    _, g1 = loss_and_grads(model, batch)
    batch.weights = batch.weights * 3.0
    _, g3 = loss_and_grads(model, batch)
    for name in g1:
        np.testing.assert_allclose(g3[name], 3.0 * g1[name], rtol=1e-12, atol=1e-15)


def test_adam_first_step_moves_each_coordinate_by_lr():
    params = {"w": np.array([1.0, -2.0, 0.5]), "z": np.array([1 + 1j])}
    grads = {"w": np.array([0.3, -7.0, 1e-3]), "z": np.array([-2.0 + 0.5j])}
    before = {k: v.copy() for k, v in params.items()}
    adam_step(AdamState(lr=0.01), params, grads)
    np.testing.assert_allclose(params["w"] - before["w"], [-0.01, 0.01, -0.01], rtol=1e-4)
    np.testing.assert_allclose(params["z"] - before["z"], [0.01 - 0.01j], rtol=1e-4)


def test_adam_zero_lr_is_noop_and_rejects_nan():
    params = {"w": np.array([1.0, 2.0])}
    adam_step(AdamState(lr=0.0, weight_decay=0.1), params, {"w": np.array([5.0, -1.0])})
    assert params["w"].tolist() == [1.0, 2.0]
    with pytest.raises(FloatingPointError):
        adam_step(AdamState(), params, {"w": np.array([np.nan, 0.0])})


def test_decoupled_weight_decay_shrinks_with_zero_gradient():
    params = {"w": np.array([2.0])}
    adam_step(AdamState(lr=0.1, weight_decay=0.5, decoupled=True), params, {"w": np.array([0.0])})
    assert params["w"][0] == pytest.approx(2.0 * (1 - 0.05))


@given(st.floats(1e-14, 1e6))
def test_log10_mse_monotone_and_clamped(mse):
    assert log10_mse(mse) == pytest.approx(max(np.log10(mse), -12.0))


def test_log10_mse_examples():
    assert log10_mse(9.0) == pytest.approx(0.954, abs=5e-4)
    assert log10_mse(0.0) == -12.0


def test_evaluate_averages_per_graph_then_over_graphs():
    class Const:
        kind = "const"

    recs = [record(path_graph(2), [1.0, 1.0]), record(path_graph(4), [0.0, 0.0, 0.0, 3.0])]
    import mpssm.train as train_mod

    orig = train_mod.predict
    train_mod.predict = lambda model, g, x: np.zeros(g.n)
    try:
        out = evaluate(Const(), recs)
    finally:
        train_mod.predict = orig
    # graph errors: 1.0 and 9/4
    assert out["mse"] == pytest.approx((1.0 + 2.25) / 2)
    with pytest.raises(ValueError):
        evaluate(Const(), [])


def test_batched_evaluate_matches_reference(tiny_dataset):
    model, _ = train_model(TrainConfig(epochs=2, k=2, hidden=4), tiny_dataset)
    recs = tiny_dataset.split("train")
    ref = evaluate(model, recs)["mse"]
    assert evaluate(model, recs, builder=BatchBuilder(False))["mse"] == pytest.approx(ref, rel=1e-10)


def test_training_is_deterministic_and_writes_history(tiny_dataset, tmp_path):
    cfg = TrainConfig(epochs=3, k=2, hidden=4)
    path = tmp_path / "h.jsonl"
    m1, h1 = train_model(cfg, tiny_dataset, path)
    m2, h2 = train_model(cfg, tiny_dataset)
    for name in m1.params:
        np.testing.assert_array_equal(m1.params[name], m2.params[name])
    lines = [json.loads(s) for s in path.read_text().splitlines()]
    assert len(lines) == 3
    assert set(lines[0]) == {"epoch", "train_mse", "val_mse", "log10_val_mse", "wall_ms"}
    assert [r["val_mse"] for r in lines] == [r["val_mse"] for r in h1]
    # the returned model is the best-val checkpoint, with standardization folded in
    best = min(r["val_mse"] for r in h1)
    assert evaluate(m1, tiny_dataset.split("val"))["mse"] == pytest.approx(best, rel=1e-9)


def test_patience_stops_early(tiny_dataset):
    _, hist = train_model(TrainConfig(epochs=50, k=1, hidden=2, lr=0.0, patience=2), tiny_dataset)
    assert len(hist) == 3


def test_overfits_single_graph():
    rec = GppRecord(cycle_graph(6), np.random.default_rng(0).random((6, 1)), np.array([3.0]), "train")
    ds = GppDataset("diameter", (rec, GppRecord(rec.graph, rec.features, rec.targets, "val")))
    cfg = TrainConfig(epochs=200, k=2, hidden=8, lr=0.01, standardize_targets=False, weight_decay=0.0)
    _, hist = train_model(cfg, ds)
    assert hist[-1]["train_mse"] < 0.01 * hist[0]["train_mse"]


def test_training_needs_splits():
    from mpssm.train import TrainingError

    rec = record(path_graph(3), [2.0])
    with pytest.raises(TrainingError):
        train_model(TrainConfig(epochs=1), GppDataset("diameter", (rec,)))


def test_config_validation_and_grid():
    with pytest.raises(ValueError):
        TrainConfig(architecture="transformer")
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"learning_rate": 1.0})
    assert TrainConfig().off_grid() == []
    assert TrainConfig(k=7, lr=0.1).off_grid() == ["lr", "k"]


def test_ablation_result_ordering():
    scores = {"gcn": [0.7], "linear_gcn": [-1.0], "linear_gcn_ws": [-0.5], "mpssm": [-3.0]}
    res = AblationResult("diameter", scores, 10, (0,))
    assert res.ordering_holds and res.gap == pytest.approx(3.7)
    scores["linear_gcn"] = [-4.0]
    assert not res.ordering_holds
    assert json.loads(json.dumps(res.to_json()))["gap"] == pytest.approx(3.7)


def _zero_predictor(monkeypatch):
    import mpssm.train as train_mod

    monkeypatch.setattr(train_mod, "predict", lambda model, g, x: np.zeros(1))


def test_zero_predictor_on_diameter_three(monkeypatch):
    _zero_predictor(monkeypatch)
    recs = [record(path_graph(4), [3.0], seed=s) for s in range(5)]
    out = evaluate(object(), recs)
    assert out["mse"] == 9.0 and out["log10_mse"] == pytest.approx(0.954, abs=5e-4)


def test_evaluate_invariant_under_record_order(tiny_dataset):
    model = build_model(TrainConfig(k=2, hidden=4), 1, 1, "mean")
    recs = list(tiny_dataset.split("train"))
    a = evaluate(model, recs)["mse"]
    b = evaluate(model, recs[::-1])["mse"]
    assert a == pytest.approx(b, rel=1e-12)


def test_one_epoch_with_zero_lr_keeps_parameters_and_loss():
    rec = record(cycle_graph(5), [2.0])
    ds = GppDataset("diameter", (rec, GppRecord(rec.graph, rec.features, rec.targets, "val")))
    cfg = TrainConfig(epochs=1, k=2, hidden=4, lr=0.0, standardize_targets=False)
    init = build_model(cfg, 1, 1, "mean")
    model, hist = train_model(cfg, ds)
    for name, value in init.params.items():
        np.testing.assert_array_equal(model.params[name], value)
    assert hist[0]["train_mse"] == pytest.approx(hist[0]["val_mse"], rel=1e-12)
