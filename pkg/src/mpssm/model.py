"""Reference (sequential, real-valued) MP-SSM blocks, deep stacks and the residual GCN baseline.

Everything here is plain numpy and stateless: a forward pass is a pure function
of the parameters and the input. The training code in :mod:`mpssm.train`
re-implements the same computations on a gradient tape; these functions are
the reference it is checked against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .graph import Graph, Gso, build_gso
from .linalg import mat_power

FORMAT_VERSION = 1
LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(x):
    return (x > 0).astype(float)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x):
    u = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(u)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)


def identity(x):
    return x


def identity_grad(x):
    return np.ones_like(x)


ACTIVATIONS = {
    "relu": (relu, relu_grad),
    "gelu": (gelu, gelu_grad),
    "identity": (identity, identity_grad),
}


def activation(name: str):
    try:
        return ACTIVATIONS[name][0]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def shift_matrix(gso) -> sp.spmatrix | np.ndarray:
    if isinstance(gso, Gso):
        return gso.matrix
    return gso


# --------------------------------------------------------------------------
# a single block


@dataclass
class BlockParams:
    """Weights of one block: recurrence ``W`` (c x c), input map ``B`` (c' x c)
    and the two-layer readout ``act(X W1 + b1) W2 + b2``."""

    W: np.ndarray
    B: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    k: int
    activation: str = "relu"

    def __post_init__(self):
        c = self.W.shape[0]
        if self.W.shape != (c, c):
            raise ValueError(f"W must be square, got {self.W.shape}")
        if self.B.shape[1] != c:
            raise ValueError(f"B has {self.B.shape[1]} columns, expected {c}")
        if self.W1.shape[0] != c or self.W2.shape[0] != self.W1.shape[1]:
            raise ValueError("MLP weight shapes do not chain")
        if self.b1.shape != (self.W1.shape[1],) or self.b2.shape != (self.W2.shape[1],):
            raise ValueError("MLP bias shapes do not match")
        if self.k < 0:
            raise ValueError("k must be non-negative")

    @property
    def in_dim(self) -> int:
        return self.B.shape[0]

    @property
    def state_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[1]

    @classmethod
    def init(cls, in_dim: int, state_dim: int, out_dim: int, k: int, hidden: int | None = None,
             seed: int | np.random.Generator = 0, activation: str = "relu") -> "BlockParams":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        hidden = state_dim if hidden is None else hidden
        return cls(
            W=glorot(rng, state_dim, state_dim),
            B=glorot(rng, in_dim, state_dim),
            W1=glorot(rng, state_dim, hidden),
            b1=np.zeros(hidden),
            W2=glorot(rng, hidden, out_dim),
            b2=np.zeros(out_dim),
            k=k,
            activation=activation,
        )

    @classmethod
    def identity_mlp(cls, W, B, k: int, activation: str = "relu") -> "BlockParams":
        """Block whose readout reduces to the bare activation (identity weights, zero biases)."""
        c = W.shape[0]
        return cls(W, B, np.eye(c), np.zeros(c), np.eye(c), np.zeros(c), k, activation)


def mlp(x: np.ndarray, W1, b1, W2, b2, act: str = "relu") -> np.ndarray:
    h = activation(act)(x @ W1 + b1)
    if act != "identity" and np.iscomplexobj(h):
        raise TypeError("activation applied to a complex array")
    return h @ W2 + b2


def block_mlp(params: BlockParams, x: np.ndarray) -> np.ndarray:
    return mlp(x, params.W1, params.b1, params.W2, params.b2, params.activation)


@dataclass(frozen=True)
class NodeSequence:
    steps: tuple[np.ndarray, ...]
    mode: str = "static"

    def __post_init__(self):
        if not self.steps:
            raise ValueError("empty input sequence")
        if self.mode not in ("static", "temporal"):
            raise ValueError(f"unknown mode {self.mode!r}")
        shape = self.steps[0].shape
        if any(s.shape != shape for s in self.steps):
            raise ValueError("all steps must share one shape")

    @property
    def k(self) -> int:
        return len(self.steps) - 1

    @property
    def n(self) -> int:
        return self.steps[0].shape[0]

    def array(self) -> np.ndarray:
        return np.stack(self.steps)


def make_input_sequence(u, k: int) -> NodeSequence:
    """Static input (one n x c' matrix) is repeated ``k + 1`` times; a list or
    3-d array is taken as a temporal sequence and must have length ``k + 1``."""
    if isinstance(u, (list, tuple)) or (isinstance(u, np.ndarray) and u.ndim == 3):
        steps = tuple(np.asarray(s, dtype=float) for s in u)
        if len(steps) == 0:
            raise ValueError("empty input sequence")
        if len(steps) != k + 1:
            raise ValueError(f"temporal input has {len(steps)} steps, expected k+1={k + 1}")
        return NodeSequence(steps, "temporal")
    u = np.asarray(u, dtype=float)
    if u.size == 0 or u.ndim != 2:
        raise ValueError(f"static input must be a non-empty n x c' matrix, got shape {u.shape}")
    return NodeSequence((u,) * (k + 1), "static")


def _check_block_input(gso, params: BlockParams, seq: NodeSequence):
    a = shift_matrix(gso)
    if seq.k != params.k:
        raise ValueError(f"sequence has k={seq.k}, block expects k={params.k}")
    if a.shape[0] != seq.n:
        raise ValueError(f"shift operator has {a.shape[0]} nodes, features have {seq.n} rows")
    if seq.steps[0].shape[1] != params.in_dim:
        raise ValueError(f"features have {seq.steps[0].shape[1]} channels, B expects {params.in_dim}")
    return a


def block_forward(gso, params: BlockParams, seq: NodeSequence):
    """Run ``X_{t+1} = A X_t W + U_{t+1} B`` from ``X_0 = 0`` for ``t = 0..k``.

    Returns ``(states, outputs)`` where ``states`` is ``[X_0, ..., X_{k+1}]``.
    Static mode decodes only the final state (``n x c_out``); temporal mode
    decodes every ``X_1..X_{k+1}`` with the shared MLP (``(k+1) x n x c_out``).
    """
    a = _check_block_input(gso, params, seq)
    x = np.zeros((seq.n, params.state_dim))
    states = [x]
    for u in seq.steps:
        x = a @ (x @ params.W) + u @ params.B
        states.append(x)
    if seq.mode == "static":
        return states, block_mlp(params, states[-1])
    return states, np.stack([block_mlp(params, s) for s in states[1:]])


def unfolded_state(gso, params: BlockParams, seq: NodeSequence) -> np.ndarray:
    """Closed form ``sum_i A^i U_{k+1-i} B W^i`` of the final state."""
    a = _check_block_input(gso, params, seq)
    a = a.toarray() if sp.issparse(a) else np.asarray(a)
    k = params.k
    x = np.zeros((seq.n, params.state_dim))
    for i in range(k + 1):
        x += mat_power(a, i) @ seq.steps[k - i] @ params.B @ mat_power(params.W, i)
    return x


def unfolded_forward(gso, params: BlockParams, seq: NodeSequence) -> np.ndarray:
    """Decoded final output via the closed form (no recurrence)."""
    return block_mlp(params, unfolded_state(gso, params, seq))


# --------------------------------------------------------------------------
# residual GCN baseline


def gcn_forward(gso, layers: Sequence, features: np.ndarray, k: int, linear: bool = False,
                shared: bool = False, residual: bool = True) -> list[np.ndarray]:
    """``X_{t+1} = act(A X_t W_t + b_t + X_t)`` for ``k`` layers, ReLU unless ``linear``.

    ``layers`` holds ``(W, b)`` pairs (``b`` may be ``None``); with ``shared``
    the first pair is reused at every step. Returns ``[X_0, ..., X_k]``.
    """
    a = shift_matrix(gso)
    if not shared and len(layers) < k:
        raise ValueError(f"need {k} layers, got {len(layers)}")
    x = np.asarray(features, dtype=float)
    states = [x]
    for t in range(k):
        w, b = layers[0] if shared else layers[t]
        if w.shape[0] != x.shape[1] or (residual and w.shape[1] != x.shape[1]):
            raise ValueError(f"layer {t} weight {w.shape} does not fit state width {x.shape[1]}")
        pre = a @ (x @ w)
        if b is not None:
            pre = pre + b
        if residual:
            pre = pre + x
        x = pre if linear else relu(pre)
        states.append(x)
    return states


# --------------------------------------------------------------------------
# deep stacks


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gamma + beta


def _pool(y: np.ndarray, pooling: str) -> np.ndarray:
    if pooling == "mean":
        return y.mean(axis=0, keepdims=True)
    if pooling == "none":
        return y
    raise ValueError(f"unknown pooling {pooling!r}")


@dataclass
class DeepModel:
    """Encoder, ``num_blocks`` MP-SSM blocks with pre-norm / dropout / residual
    between them, and an affine head. Parameters live in one flat dict."""

    params: dict[str, np.ndarray] = field(repr=False)
    k: int
    num_blocks: int
    dropout: float = 0.0
    residual: bool = True
    norm: bool = True
    pooling: str = "none"
    activation: str = "relu"
    implementation: str = "sequential"

    kind = "mpssm"

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.num_blocks < 1:
            raise ValueError("need at least one block")
        if self.implementation not in ("sequential", "fast-merged"):
            raise ValueError(f"unknown implementation {self.implementation!r}")

    @property
    def in_dim(self) -> int:
        return self.params["enc.w"].shape[0]

    @property
    def hidden(self) -> int:
        return self.params["enc.w"].shape[1]

    def config(self) -> dict:
        return {"k": self.k, "num_blocks": self.num_blocks, "dropout": self.dropout,
                "residual": self.residual, "norm": self.norm, "pooling": self.pooling,
                "activation": self.activation, "implementation": self.implementation}

    def block(self, i: int):
        p = self.params
        pre = f"block{i}."
        if self.implementation == "sequential":
            return BlockParams(p[pre + "W"], p[pre + "B"], p[pre + "W1"], p[pre + "b1"],
                               p[pre + "W2"], p[pre + "b2"], self.k, self.activation)
        from .fastscan import FastBlockParams

        return FastBlockParams(p[pre + "sigma"], p[pre + "b_hat"], p[pre + "w1_hat"],
                               p[pre + "W2"], p[pre + "b1"], p[pre + "b2"], mode="merged",
                               activation=self.activation)


def init_deep_model(in_dim: int, hidden: int, out_dim: int, k: int = 10, num_blocks: int = 2,
                    mlp_hidden: int | None = None, dropout: float = 0.0, residual: bool = True,
                    norm: bool = True, pooling: str = "none", activation: str = "relu",
                    implementation: str = "sequential", seed: int = 0, r_min: float = 0.9,
                    r_max: float = 0.999) -> DeepModel:
    rng = np.random.default_rng(seed)
    mlp_hidden = hidden if mlp_hidden is None else mlp_hidden
    p = {"enc.w": glorot(rng, in_dim, hidden), "enc.b": np.zeros(hidden)}
    for i in range(num_blocks):
        pre = f"block{i}."
        if implementation == "sequential":
            blk = BlockParams.init(hidden, hidden, hidden, k, mlp_hidden, rng, activation)
            p.update({pre + "W": blk.W, pre + "B": blk.B, pre + "W1": blk.W1,
                      pre + "b1": blk.b1, pre + "W2": blk.W2, pre + "b2": blk.b2})
        else:
            from .fastscan import init_merged_params

            fb = init_merged_params(hidden, hidden, mlp_hidden, hidden, r_min, r_max, rng, activation)
            p.update({pre + "sigma": fb.sigma, pre + "b_hat": fb.b_hat, pre + "w1_hat": fb.w1_hat,
                      pre + "W2": fb.w2, pre + "b1": fb.b1, pre + "b2": fb.b2})
        if norm:
            p[f"norm{i}.gamma"] = np.ones(hidden)
            p[f"norm{i}.beta"] = np.zeros(hidden)
    p["head.w"] = glorot(rng, hidden, out_dim)
    p["head.b"] = np.zeros(out_dim)
    return DeepModel(p, k, num_blocks, dropout, residual, norm, pooling, activation, implementation)


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    if rate == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def deep_forward(model: DeepModel, graph: Graph | Gso, features: np.ndarray, train_mode: bool = False,
                 rng: np.random.Generator | None = None, diag=None) -> np.ndarray:
    """Predictions of a deep MP-SSM on one graph.

    encode -> per block: [norm] -> block -> [dropout] -> [residual add] -> head -> [mean pool].
    ``diag`` (a precomputed ``DiagGso``) is only used by the fast-merged implementation.
    """
    gso = graph if isinstance(graph, Gso) else build_gso(graph)
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ValueError(f"features must be n x {model.in_dim}, got {x.shape}")
    if x.shape[0] != gso.n:
        raise ValueError(f"{x.shape[0]} feature rows for a {gso.n}-node graph")
    if train_mode and model.dropout > 0 and rng is None:
        raise ValueError("train-mode dropout needs an explicit rng")
    p = model.params
    h = x @ p["enc.w"] + p["enc.b"]
    if model.implementation == "fast-merged" and diag is None:
        from .fastscan import precompute_gso_eig

        diag = precompute_gso_eig(gso)
    for i in range(model.num_blocks):
        inp = layer_norm(h, p[f"norm{i}.gamma"], p[f"norm{i}.beta"]) if model.norm else h
        seq = make_input_sequence(inp, model.k)
        if model.implementation == "sequential":
            _, y = block_forward(gso, model.block(i), seq)
        else:
            from .fastscan import fast_forward

            y = fast_forward(diag, model.block(i), seq)
        if train_mode and model.dropout > 0:
            y = y * dropout_mask(rng, y.shape, model.dropout)
        h = h + y if model.residual else y
    return _pool(h @ p["head.w"] + p["head.b"], model.pooling)


@dataclass
class GCNModel:
    """Encoder, ``k`` residual GCN layers, head. ``linear`` drops the ReLU and
    ``shared`` ties all layer weights (the ablation variants). With
    ``mlp_head`` the head is a node-wise one-hidden-layer ReLU MLP instead of
    an affine map."""

    params: dict[str, np.ndarray] = field(repr=False)
    k: int
    linear: bool = False
    shared: bool = False
    residual: bool = True
    pooling: str = "none"
    mlp_head: bool = False

    kind = "gcn"

    @property
    def in_dim(self) -> int:
        return self.params["enc.w"].shape[0]

    def config(self) -> dict:
        return {"k": self.k, "linear": self.linear, "shared": self.shared,
                "residual": self.residual, "pooling": self.pooling, "mlp_head": self.mlp_head}

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        count = 1 if self.shared else self.k
        return [(self.params[f"layer{t}.W"], self.params[f"layer{t}.b"]) for t in range(count)]


def init_gcn_model(in_dim: int, hidden: int, out_dim: int, k: int, linear: bool = False,
                   shared: bool = False, residual: bool = True, pooling: str = "none",
                   mlp_head: bool = False, seed: int = 0) -> GCNModel:
    rng = np.random.default_rng(seed)
    p = {"enc.w": glorot(rng, in_dim, hidden), "enc.b": np.zeros(hidden)}
    for t in range(1 if shared else k):
        p[f"layer{t}.W"] = glorot(rng, hidden, hidden)
        p[f"layer{t}.b"] = np.zeros(hidden)
    if mlp_head:
        p["head.w1"] = glorot(rng, hidden, hidden)
        p["head.b1"] = np.zeros(hidden)
    p["head.w"] = glorot(rng, hidden, out_dim)
    p["head.b"] = np.zeros(out_dim)
    return GCNModel(p, k, linear, shared, residual, pooling, mlp_head)


def gcn_model_forward(model: GCNModel, graph: Graph | Gso, features: np.ndarray) -> np.ndarray:
    gso = graph if isinstance(graph, Gso) else build_gso(graph)
    p = model.params
    h = np.asarray(features, dtype=float) @ p["enc.w"] + p["enc.b"]
    h = gcn_forward(gso, model.layers(), h, model.k, model.linear, model.shared, model.residual)[-1]
    if model.mlp_head:
        h = relu(h @ p["head.w1"] + p["head.b1"])
    return _pool(h @ p["head.w"] + p["head.b"], model.pooling)


def predict(model, graph: Graph | Gso, features: np.ndarray) -> np.ndarray:
    """Inference-mode forward for either model family."""
    if isinstance(model, GCNModel):
        return gcn_model_forward(model, graph, features)
    return deep_forward(model, graph, features)


# --------------------------------------------------------------------------
# checkpoints


def _encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a)
    if np.iscomplexobj(a):
        return {"shape": list(a.shape), "dtype": "complex128",
                "real": a.real.ravel().tolist(), "imag": a.imag.ravel().tolist()}
    return {"shape": list(a.shape), "dtype": "float64", "data": a.ravel().tolist()}


def _decode_array(obj: dict) -> np.ndarray:
    if obj["dtype"] == "complex128":
        flat = np.asarray(obj["real"]) + 1j * np.asarray(obj["imag"])
    else:
        flat = np.asarray(obj["data"], dtype=float)
    return flat.reshape(obj["shape"])


def checkpoint_dict(model) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "model_type": model.kind,
        "config": model.config(),
        "arrays": {name: _encode_array(a) for name, a in model.params.items()},
    }


def model_from_checkpoint(obj: dict):
    if obj.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {obj.get('format_version')!r}")
    params = {name: _decode_array(a) for name, a in obj["arrays"].items()}
    cls = {"mpssm": DeepModel, "gcn": GCNModel}[obj["model_type"]]
    return cls(params, **obj["config"])


def save_checkpoint(model, path: str | Path) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model)))


def load_checkpoint(path: str | Path):
    return model_from_checkpoint(json.loads(Path(path).read_text()))
