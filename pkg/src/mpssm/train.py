"""Gradients, Adam and the training loop for the graph-property tasks."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .autodiff import Node, Tape
from .graph import GppDataset, GppRecord, build_gso
from .model import (GCNModel, dropout_mask, init_deep_model, init_gcn_model, predict)

log = logging.getLogger(__name__)

ARCHITECTURES = ("mpssm", "multi_block_linear", "one_block_linear", "linear_gcn_ws", "linear_gcn", "gcn")
LOG10_FLOOR = -12.0

# model-selection grid for graph property prediction
GPP_GRID = {
    "lr": (0.003,),
    "weight_decay": (1e-6,),
    "dropout": (0.0,),
    "k": (1, 5, 10, 20),
    "hidden": (10, 20, 30),
    "blocks": (1, 2),
}


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    task: str = "diameter"
    architecture: str = "mpssm"
    implementation: str = "sequential"
    lr: float = 0.003
    weight_decay: float = 1e-6
    decoupled_weight_decay: bool = False
    dropout: float = 0.0
    k: int = 10
    hidden: int = 20
    blocks: int = 2
    mlp_hidden: int | None = None
    activation: str = "relu"
    epochs: int = 100
    batch_size: int = 32
    patience: int | None = None
    seed: int = 0
    standardize_targets: bool = True

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        if self.implementation not in ("sequential", "fast-merged"):
            raise ValueError(f"unknown implementation {self.implementation!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def off_grid(self) -> list[str]:
        """Hyperparameters outside the graph-property model-selection grid."""
        return [name for name, values in GPP_GRID.items() if getattr(self, name) not in values]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def build_model(config: TrainConfig, in_dim: int, out_dim: int, pooling: str):
    c = config
    depth = c.k * c.blocks
    if c.architecture in ("gcn", "linear_gcn", "linear_gcn_ws"):
        # residual update and an affine head; the MLP readout first appears in one_block_linear
        return init_gcn_model(in_dim, c.hidden, out_dim, depth, linear=c.architecture != "gcn",
                              shared=c.architecture == "linear_gcn_ws", pooling=pooling, seed=c.seed)
    common = dict(mlp_hidden=c.mlp_hidden, dropout=c.dropout, pooling=pooling, activation=c.activation,
                  implementation=c.implementation, seed=c.seed)
    if c.architecture == "one_block_linear":
        return init_deep_model(in_dim, c.hidden, out_dim, k=depth, num_blocks=1, residual=False,
                               norm=False, **common)
    if c.architecture == "multi_block_linear":
        return init_deep_model(in_dim, c.hidden, out_dim, k=c.k, num_blocks=c.blocks, residual=False,
                               norm=False, **common)
    return init_deep_model(in_dim, c.hidden, out_dim, k=c.k, num_blocks=c.blocks, **common)


# --------------------------------------------------------------------------
# batches: disjoint unions of graphs


@dataclass
class Batch:
    a: sp.csr_matrix
    x: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    pool: sp.csr_matrix | None
    sizes: np.ndarray
    pool_t: sp.csr_matrix | None = None
    lam: np.ndarray | None = None
    p: sp.csr_matrix | None = None
    pt: sp.csr_matrix | None = None


class BatchBuilder:
    """Caches per-graph shift operators (and eigenbases for the fast path).

    Batch targets are stored as ``(y - target_shift) / target_scale``.
    """

    def __init__(self, node_level: bool, need_eig: bool = False, target_shift: float = 0.0,
                 target_scale: float = 1.0):
        self.node_level = node_level
        self.need_eig = need_eig
        self.target_shift = target_shift
        self.target_scale = target_scale
        self._gso = {}
        self._eig = {}

    def _graph_parts(self, rec: GppRecord):
        key = id(rec.graph)
        if key not in self._gso:
            gso = build_gso(rec.graph)
            self._gso[key] = gso
            if self.need_eig:
                from .fastscan import precompute_gso_eig
                self._eig[key] = precompute_gso_eig(gso)
        return self._gso[key], self._eig.get(key)

    def __call__(self, records: Sequence[GppRecord]) -> Batch:
        parts = [self._graph_parts(r) for r in records]
        a = sp.block_diag([g.matrix for g, _ in parts], format="csr")
        x = np.vstack([r.features for r in records])
        count = len(records)
        sizes = np.array([r.graph.n for r in records])
        if self.node_level:
            targets = np.concatenate([r.targets for r in records]).reshape(-1, 1)
            weights = np.concatenate([np.full(n, 1.0 / (count * n)) for n in sizes])
            pool = None
        else:
            targets = np.array([r.targets[0] for r in records]).reshape(-1, 1)
            weights = np.full(count, 1.0 / count)
            rows = np.repeat(np.arange(count), sizes)
            pool = sp.csr_matrix((np.repeat(1.0 / sizes, sizes), (rows, np.arange(sizes.sum()))),
                                 shape=(count, sizes.sum()))
        targets = (targets - self.target_shift) / self.target_scale
        batch = Batch(a, x, targets, weights, pool, sizes, None if pool is None else pool.T.tocsr())
        if self.need_eig:
            from .fastscan import block_diag_eig
            batch.lam, batch.p = block_diag_eig([d for _, d in parts])
            batch.pt = batch.p.T.tocsr()
        return batch


# --------------------------------------------------------------------------
# tape forward / backward


@dataclass
class GradientTape:
    tape: Tape
    params: dict[str, Node]
    output: Node
    masks: list[np.ndarray] = field(default_factory=list)


def record_forward(model, batch: Batch, train_mode: bool = False,
                   rng: np.random.Generator | None = None) -> GradientTape:
    """Forward pass of ``model`` over a batch, recorded on a fresh tape."""
    t = Tape()
    P = {name: t.param(v, name) for name, v in model.params.items()}
    masks = []
    h = t.add(t.matmul(t.const(batch.x), P["enc.w"]), P["enc.b"])
    if isinstance(model, GCNModel):
        for step in range(model.k):
            idx = 0 if model.shared else step
            pre = t.add(t.spmm(batch.a, t.matmul(h, P[f"layer{idx}.W"]), batch.a), P[f"layer{idx}.b"])
            if model.residual:
                pre = t.add(pre, h)
            h = pre if model.linear else t.act(pre, "relu")
        if model.mlp_head:
            h = t.act(t.add(t.matmul(h, P["head.w1"]), P["head.b1"]), "relu")
    else:
        if train_mode and model.dropout > 0 and rng is None:
            raise ValueError("train-mode dropout needs an explicit rng")
        for i in range(model.num_blocks):
            pre = f"block{i}."
            inp = t.layer_norm(h, P[f"norm{i}.gamma"], P[f"norm{i}.beta"]) if model.norm else h
            if model.implementation == "sequential":
                xb = t.matmul(inp, P[pre + "B"])
                x = xb
                for _ in range(model.k):
                    x = t.add(t.spmm(batch.a, t.matmul(x, P[pre + "W"]), batch.a), xb)
                hid = t.add(t.matmul(x, P[pre + "W1"]), P[pre + "b1"])
            else:
                if batch.p is None:
                    raise ValueError("fast-merged model needs a batch built with need_eig=True")
                xb = t.matmul(t.spmm(batch.pt, inp, batch.p), P[pre + "b_hat"])
                z = t.mul(xb, t.power_sum(batch.lam, P[pre + "sigma"], model.k))
                hid = t.add(t.real(t.matmul(t.spmm(batch.p, z, batch.pt), P[pre + "w1_hat"])), P[pre + "b1"])
            y = t.add(t.matmul(t.act(hid, model.activation), P[pre + "W2"]), P[pre + "b2"])
            if train_mode and model.dropout > 0:
                mask = dropout_mask(rng, y.shape, model.dropout)
                masks.append(mask)
                y = t.scale(y, mask)
            h = t.add(h, y) if model.residual else y
    out = t.add(t.matmul(h, P["head.w"]), P["head.b"])
    if batch.pool is not None:
        out = t.spmm(batch.pool, out, batch.pool_t)
    return GradientTape(t, P, out, masks)


def backward(model, gtape: GradientTape, loss_grad) -> dict[str, np.ndarray]:
    """Gradients of every parameter given d loss / d output."""
    if set(gtape.params) != set(model.params):
        raise ValueError("tape was recorded for a different model")
    gtape.tape.backward(gtape.output, loss_grad)
    out = {}
    for name, node in gtape.params.items():
        out[name] = np.zeros_like(node.value) if node.grad is None else node.grad
    return out


def loss_and_grads(model, batch: Batch, train_mode: bool = False, rng=None):
    gt = record_forward(model, batch, train_mode, rng)
    pred = gt.output.value
    resid = pred - batch.targets
    w = batch.weights.reshape(-1, 1)
    loss = float(np.sum(w * resid ** 2))
    return loss, backward(model, gt, 2.0 * w * resid)


# --------------------------------------------------------------------------
# optimizer


def _real_view(a: np.ndarray) -> np.ndarray:
    return a.view(np.float64) if np.iscomplexobj(a) else a


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = False
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """Bias-corrected Adam update, in place. ``decoupled`` selects AdamW-style decay.

    Complex parameters are updated as pairs of independent real numbers.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        pr = _real_view(p)
        g = np.array(_real_view(np.ascontiguousarray(grads[name])), dtype=float)
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * pr
        if name not in state.m:
            state.m[name] = np.zeros_like(pr)
            state.v[name] = np.zeros_like(pr)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay and state.decoupled:
            pr -= state.lr * state.weight_decay * pr
        pr -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# --------------------------------------------------------------------------
# metrics and the training loop


def log10_mse(mse: float) -> float:
    return float(np.log10(max(mse, 10.0 ** LOG10_FLOOR)))


def evaluate(model, records: Sequence[GppRecord], task: str | None = None,
             builder: BatchBuilder | None = None, batch_size: int = 128) -> dict:
    """MSE and clamped log10(MSE); per-node errors are averaged within each graph first.

    With a ``builder`` the records are run through the batched forward (the
    model is then taken to predict in the builder's standardized units),
    otherwise one graph at a time through ``predict``.
    """
    if not records:
        raise ValueError("cannot evaluate on an empty split")
    per_graph = []
    if builder is None:
        for r in records:
            pred = np.ravel(predict(model, r.graph, r.features))
            per_graph.append(float(np.mean((pred - np.ravel(r.targets)) ** 2)))
    else:
        for start in range(0, len(records), batch_size):
            batch = builder(records[start:start + batch_size])
            err = np.ravel(record_forward(model, batch).output.value - batch.targets) ** 2
            err = err * builder.target_scale ** 2
            if builder.node_level:
                per_graph.extend(np.add.reduceat(err, np.r_[0, np.cumsum(batch.sizes)[:-1]]) / batch.sizes)
            else:
                per_graph.extend(err)
    mse = float(np.mean(per_graph))
    return {"mse": mse, "log10_mse": log10_mse(mse), "count": len(records)}


def train_model(config: TrainConfig, dataset: GppDataset, history_path: str | Path | None = None):
    """Train on the ``train`` split, select the best ``val`` epoch.

    Returns ``(model, history)``; ``history`` is a list of per-epoch dicts,
    also written as JSON lines to ``history_path`` when given.
    """
    train = dataset.split("train")
    val = dataset.split("val")
    if not train or not val:
        raise TrainingError("dataset needs non-empty train and val splits")
    if config.off_grid():
        log.info("off-grid hyperparameters: %s", ", ".join(config.off_grid()))
    node_level = dataset.node_level
    in_dim = train[0].features.shape[1]
    model = build_model(config, in_dim, 1, "none" if node_level else "mean")
    needs_eig = getattr(model, "implementation", "sequential") == "fast-merged"
    shift, scale = 0.0, 1.0
    if config.standardize_targets:
        ys = np.concatenate([np.ravel(r.targets) for r in train])
        shift, scale = float(ys.mean()), float(ys.std()) or 1.0
    builder = BatchBuilder(node_level, needs_eig, shift, scale)
    opt = AdamState(lr=config.lr, weight_decay=config.weight_decay,
                    decoupled=config.decoupled_weight_decay)
    rng = np.random.default_rng(config.seed)
    history = []
    best = (np.inf, copy.deepcopy(model.params), -1)
    since_best = 0
    fh = open(history_path, "w") if history_path else None
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            order = rng.permutation(len(train))
            total, seen = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                recs = [train[i] for i in order[start:start + config.batch_size]]
                loss, grads = loss_and_grads(model, builder(recs), True, rng)
                if not np.isfinite(loss):
                    raise DivergenceError(epoch, loss)
                adam_step(opt, model.params, grads)
                total += loss * scale ** 2 * len(recs)
                seen += len(recs)
            val_mse = evaluate(model, val, builder=builder)["mse"]
            if not np.isfinite(val_mse):
                raise DivergenceError(epoch, val_mse)
            rec = {"epoch": epoch, "train_mse": total / seen, "val_mse": val_mse,
                   "log10_val_mse": log10_mse(val_mse),
                   "wall_ms": 1000.0 * (time.perf_counter() - t0)}
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if val_mse < best[0]:
                best = (val_mse, copy.deepcopy(model.params), epoch)
                since_best = 0
            else:
                since_best += 1
                if config.patience is not None and since_best >= config.patience:
                    break
    finally:
        if fh:
            fh.close()
    model.params = best[1]
    # fold the target standardization into the affine head
    model.params["head.w"] = model.params["head.w"] * scale
    model.params["head.b"] = model.params["head.b"] * scale + shift
    return model, history


# --------------------------------------------------------------------------
# gradient checking against the reference forward


def _reference_loss(model, graph, features, targets) -> float:
    pred = np.ravel(predict(model, graph, features))
    return float(np.mean((pred - np.ravel(targets)) ** 2))


def analytic_gradients(model, graph, features, targets) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and tape gradients of the per-graph MSE on one graph."""
    rec = GppRecord(graph, np.asarray(features, dtype=float), np.atleast_1d(targets), "train")
    needs_eig = getattr(model, "implementation", "sequential") == "fast-merged"
    batch = BatchBuilder(model.pooling == "none", needs_eig)([rec])
    return loss_and_grads(model, batch)


def numeric_gradients(model, graph, features, targets, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of the reference loss, one scalar at a time.

    Complex parameters get ``dL/dRe + 1j dL/dIm``, matching the tape.
    """
    out = {}
    for name, p in model.params.items():
        g = np.zeros(p.shape, dtype=p.dtype)
        for part in ((1.0, 1j) if np.iscomplexobj(p) else (1.0,)):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h * part
                up = _reference_loss(model, graph, features, targets)
                p[idx] = old - h * part
                down = _reference_loss(model, graph, features, targets)
                p[idx] = old
                g[idx] += part * (up - down) / (2 * h)
        out[name] = g
    return out


def gradient_check(model, graph, features, targets, h: float = 1e-5) -> dict[str, float]:
    """Relative max-abs error of the tape gradient for every parameter.

    Complex parameters are reported as ``name.re`` and ``name.im``.
    """
    _, analytic = analytic_gradients(model, graph, features, targets)
    numeric = numeric_gradients(model, graph, features, targets, h)
    errors = {}
    for name in model.params:
        parts = [("", np.real)]
        if np.iscomplexobj(model.params[name]):
            parts = [(".re", np.real), (".im", np.imag)]
        for suffix, take in parts:
            a, n = take(analytic[name]), take(numeric[name])
            scale = max(np.abs(n).max(), np.abs(a).max(), 1e-6)
            errors[name + suffix] = float(np.abs(a - n).max() / scale)
    return errors


# --------------------------------------------------------------------------
# architecture ladder

LINEAR_VARIANTS = ("linear_gcn", "linear_gcn_ws", "one_block_linear", "multi_block_linear")


@dataclass
class AblationResult:
    task: str
    scores: dict[str, list[float]]
    epochs: int
    seeds: tuple[int, ...]
    seconds: float = 0.0

    def mean(self, arch: str) -> float:
        return float(np.mean(self.scores[arch]))

    @property
    def gap(self) -> float:
        """Mean test log10(MSE) of the GCN baseline minus that of MP-SSM."""
        return self.mean("gcn") - self.mean("mpssm")

    @property
    def ordering_holds(self) -> bool:
        """GCN worst, every linear variant in between, MP-SSM best."""
        lin = [self.mean(a) for a in LINEAR_VARIANTS if a in self.scores]
        return all(self.mean("gcn") > v > self.mean("mpssm") for v in lin)

    def to_json(self) -> dict:
        return {"task": self.task, "epochs": self.epochs, "seeds": list(self.seeds),
                "seconds": self.seconds, "scores": self.scores,
                "mean": {a: self.mean(a) for a in self.scores}, "gap": self.gap,
                "ordering_holds": self.ordering_holds}


def ablation_experiment(dataset: GppDataset, seeds: Sequence[int] = (0, 1, 2), epochs: int = 100,
                        architectures: Sequence[str] = ARCHITECTURES, progress=None,
                        **overrides) -> AblationResult:
    """Train every architecture once per seed under the same budget; score on ``test``."""
    if "mpssm" not in architectures or "gcn" not in architectures:
        raise ValueError("the ladder needs at least the mpssm and gcn architectures")
    test = dataset.split("test")
    t0 = time.perf_counter()
    scores = {a: [] for a in architectures}
    for arch in architectures:
        for seed in seeds:
            cfg = TrainConfig(task=dataset.task, architecture=arch, epochs=epochs, seed=seed, **overrides)
            model, _ = train_model(cfg, dataset)
            score = evaluate(model, test)["log10_mse"]
            scores[arch].append(score)
            if progress:
                progress(arch, seed, score)
    return AblationResult(dataset.task, scores, epochs, tuple(seeds), time.perf_counter() - t0)
