import json

import numpy as np
import pytest

from mpssm.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VERIFY, load_config, main
from mpssm.graph import clique_chain, path_graph


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "data.jsonl"
    assert main(["gen-data", "--task", "diameter", "--count", "20", "--out", str(path), "--seed", "2"]) == 0
    return path


def test_gen_data_writes_jsonl(data_file):
    lines = data_file.read_text().splitlines()
    assert len(lines) == 20
    rec = json.loads(lines[0])
    assert set(rec) == {"edges", "features", "targets", "split"}


def test_gen_data_is_seeded(tmp_path, data_file):
    again = tmp_path / "again.jsonl"
    main(["gen-data", "--count", "20", "--out", str(again), "--seed", "2"])
    assert again.read_text() == data_file.read_text()


def test_train_then_eval(tmp_path, data_file, capsys):
    ckpt, hist = tmp_path / "m.json", tmp_path / "h.jsonl"
    code = main(["train", "--data", str(data_file), "--out", str(ckpt), "--history", str(hist),
                 "--epochs", "2", "--set", "train.k=2", "--set", "train.hidden=4"])
    assert code == EXIT_OK
    assert json.loads(ckpt.read_text())["format_version"] == 1
    assert len(hist.read_text().splitlines()) == 2
    capsys.readouterr()
    out = tmp_path / "metrics.json"
    assert main(["eval", "--data", str(data_file), "--model", str(ckpt), "--out", str(out)]) == EXIT_OK
    metrics = json.loads(out.read_text())
    assert metrics["split"] == "test" and metrics["log10_mse"] == pytest.approx(np.log10(metrics["mse"]))


def test_config_file_and_override_precedence(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"train.lr": 0.01, "bench.n": 50}))
    cfg = load_config(str(cfg_path), ["train.lr=0.02"])
    assert cfg["train.lr"] == 0.02 and cfg["bench.n"] == 50


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["train", "--data", "x.jsonl"],
    ["gen-data", "--out", "x", "--set", "nonsense.key=1"],
    ["gen-data", "--out", "x", "--set", "novalue"],
    ["verify", "--criteria", "99"],
    ["verify", "--criteria", "a,b"],
    ["bench", "--ks", "10"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == EXIT_USAGE


def test_bad_config_file_exits_1(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--config", str(bad)]) == EXIT_USAGE


def test_bad_training_value_exits_1(data_file, tmp_path):
    code = main(["train", "--data", str(data_file), "--out", str(tmp_path / "m"),
                 "--architecture", "transformer"])
    assert code == EXIT_USAGE


def test_runtime_error_exits_3(tmp_path):
    assert main(["eval", "--data", str(tmp_path / "missing.jsonl"), "--model", "nope.json"]) == EXIT_RUNTIME


def test_jacobian_formats(tmp_path, capsys):
    g = tmp_path / "g.txt"
    path_graph(5).save(g)
    wfile = tmp_path / "w.json"
    wfile.write_text(json.dumps(np.eye(2).tolist()))
    assert main(["jacobian", "--graph", str(g), "--w", str(wfile), "--delta", "2"]) == EXIT_OK
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[0] == "i,j,sensitivity" and len(rows) == 26
    out = tmp_path / "r.json"
    assert main(["jacobian", "--graph", str(g), "--format", "json", "--out", str(out)]) == EXIT_OK
    rep = json.loads(out.read_text())
    assert rep["delta"] == 8 and rep["global_bound_holds"]
    assert main(["jacobian", "--graph", str(g), "--format", "text"]) == EXIT_OK
    assert "bound_global" in capsys.readouterr().out


def test_jacobian_rejects_non_square_w(tmp_path):
    g = tmp_path / "g.txt"
    clique_chain(2, 3).save(g)
    wfile = tmp_path / "w.json"
    wfile.write_text("[[1, 2]]")
    assert main(["jacobian", "--graph", str(g), "--w", str(wfile)]) == EXIT_USAGE


def test_verify_pass_and_report(tmp_path, capsys):
    out = tmp_path / "v.json"
    assert main(["verify", "--criteria", "1,3", "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "[PASS] criterion 1" in text and "[PASS] criterion 3" in text
    assert json.loads(out.read_text())["passed"] is True


def test_verify_failure_exits_2(monkeypatch, capsys):
    from mpssm import checks

    failing = checks.CheckResult(1, "stub", False, 0.0, None, {})
    monkeypatch.setitem(checks.CHECKS, 1, lambda: failing)
    assert main(["verify", "--criteria", "1"]) == EXIT_VERIFY
    assert "[FAIL]" in capsys.readouterr().out


def test_bench_small(tmp_path, capsys):
    out = tmp_path / "b.json"
    code = main(["bench", "--n", "12", "--c", "4", "--ks", "2,8", "--repeats", "5", "--out", str(out)])
    assert code == EXIT_OK
    prof = json.loads(out.read_text())
    assert prof["repeats"] == 5
    assert "median of 5 runs after 2 warmups" in capsys.readouterr().out
