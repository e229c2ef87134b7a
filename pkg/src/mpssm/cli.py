"""Command-line entry point: ``mpssm <subcommand> [options]``.

Configuration comes from an optional flat JSON file with dotted keys
(``"train.lr": 0.003``), then ``--set key=value`` overrides, then explicit
flags; later sources win.
"""

from __future__ import annotations

import argparse
import inspect
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3

DEFAULTS = {
    "data.task": "diameter",
    "data.count": 500,
    "data.n_min": 25,
    "data.n_max": 35,
    "data.split": [0.7, 0.15, 0.15],
    "eval.split": "test",
    "verify.criteria": [1, 2, 3, 4, 5, 6, 7, 10],
    "bench.n": 100,
    "bench.c": 32,
    "bench.ks": [10, 100, 1000],
    "bench.repeats": 5,
    "jacobian.delta": 8,
    "jacobian.c": 4,
    "jacobian.sample_pairs": None,
    "seed": 0,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _train_keys() -> set[str]:
    from .train import TrainConfig

    return {f"train.{f.name}" for f in fields(TrainConfig)}


def known_keys() -> set[str]:
    return set(DEFAULTS) | _train_keys()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a flat JSON object")
        cfg.update(data)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        cfg[key.strip()] = _parse_value(value)
    unknown = set(cfg) - known_keys()
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return cfg


def train_config(cfg: dict):
    from .train import TrainConfig

    kw = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("train.")}
    kw.setdefault("task", cfg["data.task"])
    kw.setdefault("seed", cfg["seed"])
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from None


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg) -> int:
    from .graph import gen_gpp_dataset

    ds = gen_gpp_dataset(cfg["data.task"], int(cfg["data.count"]),
                         (int(cfg["data.n_min"]), int(cfg["data.n_max"])), int(cfg["seed"]),
                         cfg["data.split"])
    ds.save(args.out)
    counts = {s: len(ds.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(ds.records)} {ds.task} records to {args.out} {counts}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    from .graph import GppDataset
    from .model import save_checkpoint
    from .train import evaluate, train_model

    config = train_config(cfg)
    ds = GppDataset.load(args.data, config.task)
    model, history = train_model(config, ds, history_path=args.history)
    save_checkpoint(model, args.out)
    best = min(history, key=lambda r: r["val_mse"]) if history else None
    summary = {"checkpoint": args.out, "epochs_run": len(history),
               "best_epoch": best["epoch"] if best else None,
               "val": evaluate(model, ds.split("val"))}
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    from .graph import GppDataset
    from .model import load_checkpoint
    from .train import evaluate

    model = load_checkpoint(args.model)
    ds = GppDataset.load(args.data, cfg["data.task"])
    records = ds.split(cfg["eval.split"])
    if not records:
        raise UsageError(f"split {cfg['eval.split']!r} is empty in {args.data}")
    metrics = evaluate(model, records, cfg["data.task"])
    metrics["split"] = cfg["eval.split"]
    _write(args.out, json.dumps(metrics, indent=2))
    return EXIT_OK


def _seeded(fn, seed: int):
    params = inspect.signature(fn).parameters
    return (lambda: fn(seed=seed)) if "seed" in params else fn


def cmd_verify(args, cfg) -> int:
    from .checks import CHECKS

    criteria = sorted(CHECKS) if args.all else [int(c) for c in cfg["verify.criteria"]]
    bad = [c for c in criteria if c not in CHECKS]
    if bad:
        raise UsageError(f"unknown criteria {bad}; valid are 1..{len(CHECKS)}")
    results = []
    for c in criteria:
        res = _seeded(CHECKS[c], int(cfg["seed"]))()
        print(res.line(), flush=True)
        results.append(res)
    report = {"passed": all(r.ok for r in results), "checks": [r.to_json() for r in results]}
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    print(f"{sum(r.ok for r in results)}/{len(results)} checks passed")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def cmd_bench(args, cfg) -> int:
    from .checks import runtime_profile

    ks = [int(k) for k in cfg["bench.ks"]]
    if len(ks) < 2:
        raise UsageError("bench needs at least two k values")
    prof = runtime_profile(int(cfg["bench.n"]), int(cfg["bench.c"]), tuple(ks),
                           int(cfg["bench.repeats"]), int(cfg["seed"]))
    print(f"n={prof['n']} c={prof['c']} median of {prof['repeats']} runs after 2 warmups")
    print(f"{'k':>6} {'sequential_ms':>14} {'fast_ms':>10} {'fast_scan_ms':>13} {'max_abs_dev':>12}")
    for k in ks:
        print(f"{k:>6} {1e3 * prof['sequential'][k]:>14.3f} {1e3 * prof['fast'][k]:>10.3f} "
              f"{1e3 * prof['fast_scan'][k]:>13.3f} {prof['max_abs_deviation'][k]:>12.2e}")
    print(f"ratio t(k={ks[-1]})/t(k={ks[0]}): sequential {prof['sequential_ratio']:.1f}, "
          f"fast {prof['fast_ratio']:.2f}, fast scan {prof['fast_scan_ratio']:.1f}")
    if args.out:
        Path(args.out).write_text(json.dumps(prof, indent=2, default=str))
    if args.check:
        ok = (prof["fast_ratio"] <= 3.0 and prof["sequential_ratio"] >= 20.0
              and max(prof["max_abs_deviation"].values()) < 1e-5)
        print(f"[{'PASS' if ok else 'FAIL'}] runtime profile")
        return EXIT_OK if ok else EXIT_VERIFY
    return EXIT_OK


def cmd_jacobian(args, cfg) -> int:
    from .graph import Graph
    from .sensitivity import sensitivity_profile

    try:
        graph = Graph.load(args.graph)
    except OSError as exc:
        raise UsageError(f"cannot read graph {args.graph}: {exc}") from None
    if args.w:
        w = np.asarray(json.loads(Path(args.w).read_text()), dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise UsageError("W must be a square JSON matrix")
    else:
        c = int(cfg["jacobian.c"])
        w = np.random.default_rng(int(cfg["seed"])).standard_normal((c, c)) / np.sqrt(c)
    pairs = cfg["jacobian.sample_pairs"]
    rep = sensitivity_profile(graph, w, int(cfg["jacobian.delta"]),
                              sample_pairs=None if pairs is None else int(pairs), seed=int(cfg["seed"]))
    if args.format == "csv":
        text = rep.to_csv()
    elif args.format == "json":
        text = rep.to_json()
    else:
        text = rep.to_text()
    _write(args.out, text)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat JSON config with dotted keys")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mpssm", description="Message-passing state-space models on graphs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate a graph-property dataset (JSON lines)")
    g.add_argument("--task", choices=("diameter", "sssp", "eccentricity"))
    g.add_argument("--count", type=int)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--task", choices=("diameter", "sssp", "eccentricity"))
    t.add_argument("--architecture")
    t.add_argument("--implementation", choices=("sequential", "fast-merged"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="per-epoch JSON-lines history path")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset split")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--task", choices=("diameter", "sssp", "eccentricity"))
    e.add_argument("--split", choices=("train", "val", "test"))
    e.add_argument("--out")

    v = sub.add_parser("verify", parents=[common], help="run acceptance checks")
    v.add_argument("--criteria", type=_int_list, help="comma-separated criterion numbers (default 1-7,10)")
    v.add_argument("--all", action="store_true", help="run all criteria, including training and runtime")
    v.add_argument("--out", help="JSON report path")

    b = sub.add_parser("bench", parents=[common], help="sequential vs fast runtime over k")
    b.add_argument("--n", type=int)
    b.add_argument("--c", type=int)
    b.add_argument("--ks", type=_int_list, help="comma-separated recurrence lengths")
    b.add_argument("--repeats", type=int)
    b.add_argument("--check", action="store_true", help="apply the runtime-ratio thresholds")
    b.add_argument("--out")

    j = sub.add_parser("jacobian", parents=[common], help="per-pair sensitivity report for one graph")
    j.add_argument("--graph", required=True, help="edge-list file")
    j.add_argument("--w", help="JSON square matrix W (random if omitted)")
    j.add_argument("--delta", type=int)
    j.add_argument("--sample-pairs", type=int)
    j.add_argument("--format", choices=("csv", "json", "text"), default="csv")
    j.add_argument("--out")
    return p


FLAG_KEYS = {
    "seed": "seed", "task": "data.task", "count": "data.count", "architecture": "train.architecture",
    "implementation": "train.implementation", "epochs": "train.epochs", "split": "eval.split",
    "criteria": "verify.criteria", "n": "bench.n", "c": "bench.c", "ks": "bench.ks",
    "repeats": "bench.repeats", "delta": "jacobian.delta", "sample_pairs": "jacobian.sample_pairs",
}

COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify,
            "bench": cmd_bench, "jacobian": cmd_jacobian}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, args.overrides)
        for attr, key in FLAG_KEYS.items():
            value = getattr(args, attr, None)
            if value is not None:
                cfg[key] = value
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
