"""Graphs, the normalized shift operator, synthetic generators and BFS labels."""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

UNREACHABLE = np.iinfo(np.int64).max
TASKS = ("diameter", "sssp", "eccentricity")
MAX_CONNECT_ATTEMPTS = 1000


class GraphError(ValueError):
    pass


class GraphGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph on nodes ``0..n-1``.

    Edges are stored once as ``(i, j)`` with ``i < j``; self-loops are never
    stored (the shift operator adds them). ``indptr``/``indices`` give the CSR
    neighbor lists, sorted per node.
    """

    n: int
    edges: tuple[tuple[int, int], ...]
    indptr: np.ndarray = field(repr=False, compare=False)
    indices: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Sequence[int]]) -> "Graph":
        n = int(n)
        if n < 1:
            raise GraphError(f"node count must be positive, got {n}")
        canon = set()
        for e in edges:
            i, j = int(e[0]), int(e[1])
            if i == j:
                raise GraphError(f"self-loop on node {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise GraphError(f"edge ({i}, {j}) out of range for n={n}")
            canon.add((min(i, j), max(i, j)))
        ordered = tuple(sorted(canon))
        if ordered:
            e = np.asarray(ordered, dtype=np.int64)
            rows = np.concatenate([e[:, 0], e[:, 1]])
            cols = np.concatenate([e[:, 1], e[:, 0]])
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
        adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        adj.sort_indices()
        indptr = adj.indptr.astype(np.int64)
        indices = adj.indices.astype(np.int64)
        indptr.setflags(write=False)
        indices.setflags(write=False)
        return cls(n, ordered, indptr, indices)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.indices))
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def fingerprint(self) -> str:
        h = hashlib.sha256(f"n={self.n};".encode())
        h.update(np.asarray(self.edges, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]

    def permute(self, perm: Sequence[int]) -> "Graph":
        """Relabel node ``v`` as ``perm[v]``."""
        perm = np.asarray(perm)
        return Graph.from_edges(self.n, [(perm[i], perm[j]) for i, j in self.edges])

    def is_connected(self) -> bool:
        return bfs_oracle(self).connected

    # -- text edge-list format: header "n <count>", then one "i j" per line
    def to_text(self) -> str:
        lines = [f"n {self.n}"] + [f"{i} {j}" for i, j in self.edges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Graph":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        if not lines or not lines[0].startswith("n "):
            raise GraphError("edge list must start with a header line 'n <count>'")
        n = int(lines[0].split()[1])
        edges = []
        for ln in lines[1:]:
            parts = ln.split()
            if len(parts) != 2:
                raise GraphError(f"malformed edge line: {ln!r}")
            edges.append((int(parts[0]), int(parts[1])))
        return cls.from_edges(n, edges)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "Graph":
        return cls.from_text(Path(path).read_text())


def disjoint_union(graphs: Sequence[Graph]) -> tuple[Graph, np.ndarray]:
    """Stack graphs into one block-diagonal graph; also returns node offsets."""
    offsets = np.zeros(len(graphs) + 1, dtype=np.int64)
    edges = []
    for g_idx, g in enumerate(graphs):
        off = offsets[g_idx]
        edges.extend((i + off, j + off) for i, j in g.edges)
        offsets[g_idx + 1] = off + g.n
    return Graph.from_edges(int(offsets[-1]), edges), offsets


# --------------------------------------------------------------------------
# shift operator


@dataclass(frozen=True)
class Gso:
    """Symmetrically normalized adjacency with self-loops, D^-1/2 (Ã + I) D^-1/2."""

    matrix: sp.csr_matrix = field(repr=False)
    inv_sqrt_deg: np.ndarray = field(repr=False)
    eig: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def with_eig(self, method: str = "jacobi") -> "Gso":
        from .linalg import sym_eig

        if self.eig is not None:
            return self
        return Gso(self.matrix, self.inv_sqrt_deg, sym_eig(self.dense(), method=method))

    def __matmul__(self, x):
        return self.matrix @ x


def build_gso(graph: Graph) -> Gso:
    deg = graph.degrees.astype(float) + 1.0
    inv_sqrt = 1.0 / np.sqrt(deg)
    a = graph.adjacency() + sp.identity(graph.n, format="csr")
    d = sp.diags(inv_sqrt)
    mat = (d @ a @ d).tocsr()
    mat.sort_indices()
    return Gso(mat, inv_sqrt)


# --------------------------------------------------------------------------
# generators


def path_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def cycle_graph(n: int) -> Graph:
    if n < 3:
        raise GraphError("a cycle needs at least 3 nodes")
    return Graph.from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def complete_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def clique_chain(m: int, d: int) -> Graph:
    """``m`` cliques of order ``d`` chained by ``m-1`` degree-2 bridge nodes.

    Clique ``c`` owns nodes ``c*d .. c*d+d-1``; bridge ``b`` (between clique
    ``b`` and ``b+1``) is node ``m*d + b``. A bridge attaches to the last node
    of the clique on its left and the first node of the clique on its right,
    so no clique node carries more than one bridge edge.
    """
    if m < 2 or d < 3:
        raise GraphError("clique_chain needs m >= 2 and d >= 3")
    edges = []
    for c in range(m):
        base = c * d
        edges += [(base + a, base + b) for a in range(d) for b in range(a + 1, d)]
    for b in range(m - 1):
        bridge = m * d + b
        edges.append((b * d + d - 1, bridge))
        edges.append((bridge, (b + 1) * d))
    return Graph.from_edges(m * d + m - 1, edges)


def bridge_nodes(m: int, d: int) -> list[int]:
    return [m * d + b for b in range(m - 1)]


def erdos_renyi(n: int, p: float, rng: np.random.Generator) -> Graph:
    if not 0.0 <= p <= 1.0:
        raise GraphError(f"edge probability must be in [0, 1], got {p}")
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    return Graph.from_edges(n, zip(iu[keep], ju[keep]))


def random_tree(n: int, rng: np.random.Generator) -> Graph:
    # uniform random recursive tree: each node attaches to an earlier one
    parents = [int(rng.integers(0, v)) for v in range(1, n)]
    return Graph.from_edges(n, [(p, v) for v, p in zip(range(1, n), parents)])


def gen_graph(kind: str, seed: int | np.random.Generator = 0, require_connected: bool = False,
              **kw) -> Graph:
    """Build a graph of the given kind.

    Kinds and their keyword arguments: ``erdos_renyi(n, p)``,
    ``clique_chain(m, d)``, ``path(n)``, ``cycle(n)``, ``tree(n)``,
    ``complete(n)``. With ``require_connected`` random kinds are resampled
    until connected (at most 1000 attempts, then ``GraphGenerationError``).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if kind == "erdos_renyi":
        n, p = int(kw["n"]), float(kw["p"])
        if n < 1:
            raise GraphError("n must be >= 1")
        for _ in range(MAX_CONNECT_ATTEMPTS):
            g = erdos_renyi(n, p, rng)
            if not require_connected or g.is_connected():
                return g
        raise GraphGenerationError(
            f"no connected G({n}, {p}) sample in {MAX_CONNECT_ATTEMPTS} attempts")
    builders = {
        "clique_chain": lambda: clique_chain(int(kw["m"]), int(kw["d"])),
        "path": lambda: path_graph(int(kw["n"])),
        "cycle": lambda: cycle_graph(int(kw["n"])),
        "complete": lambda: complete_graph(int(kw["n"])),
        "tree": lambda: random_tree(int(kw["n"]), rng),
    }
    if kind not in builders:
        raise GraphError(f"unknown graph kind {kind!r}")
    g = builders[kind]()
    if require_connected and not g.is_connected():
        raise GraphGenerationError(f"{kind} graph is not connected")
    return g


# --------------------------------------------------------------------------
# structural oracle


@dataclass(frozen=True)
class StructuralOracle:
    dist: np.ndarray
    ecc: np.ndarray
    diameter: int
    connected: bool

    def finite(self) -> np.ndarray:
        return self.dist != UNREACHABLE


def bfs_distances(graph: Graph, source: int) -> np.ndarray:
    dist = np.full(graph.n, UNREACHABLE, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    indptr, indices = graph.indptr, graph.indices
    while queue:
        u = queue.popleft()
        du = dist[u] + 1
        for v in indices[indptr[u]:indptr[u + 1]]:
            if dist[v] == UNREACHABLE:
                dist[v] = du
                queue.append(v)
    return dist


def bfs_oracle(graph: Graph) -> StructuralOracle:
    dist = np.stack([bfs_distances(graph, s) for s in range(graph.n)])
    finite = dist != UNREACHABLE
    ecc = np.where(finite, dist, -1).max(axis=1)
    return StructuralOracle(dist, ecc, int(ecc.max()), bool(finite.all()))


# --------------------------------------------------------------------------
# graph property prediction data


@dataclass(frozen=True)
class GppRecord:
    graph: Graph
    features: np.ndarray
    targets: np.ndarray
    split: str

    def to_json(self) -> str:
        return json.dumps({
            "edges": [list(e) for e in self.graph.edges],
            "features": self.features.tolist(),
            "targets": self.targets.tolist(),
            "split": self.split,
        })

    @classmethod
    def from_json(cls, line: str) -> "GppRecord":
        obj = json.loads(line)
        feats = np.asarray(obj["features"], dtype=float)
        graph = Graph.from_edges(len(feats), obj["edges"])
        return cls(graph, feats, np.asarray(obj["targets"], dtype=float), obj["split"])


@dataclass(frozen=True)
class GppDataset:
    task: str
    records: tuple[GppRecord, ...]

    @property
    def node_level(self) -> bool:
        return self.task != "diameter"

    def split(self, name: str) -> list[GppRecord]:
        return [r for r in self.records if r.split == name]

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(r.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path, task: str) -> "GppDataset":
        with open(path) as fh:
            recs = tuple(GppRecord.from_json(ln) for ln in fh if ln.strip())
        return cls(task, recs)


def split_counts(count: int, fractions: Sequence[float]) -> list[int]:
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    val = int(round(count * fractions[1]))
    test = int(round(count * fractions[2]))
    return [count - val - test, val, test]


def _sample_gpp_graph(n: int, rng: np.random.Generator) -> Graph:
    # mix of dense-ish random graphs and trees so diameters span a useful range
    if rng.random() < 2 / 3:
        p_lo = min(1.2 * np.log(n) / n, 0.9)
        p = rng.uniform(p_lo, max(p_lo, 0.3))
        return gen_graph("erdos_renyi", rng, require_connected=True, n=n, p=p)
    return random_tree(n, rng)


def make_gpp_record(graph: Graph, task: str, rng: np.random.Generator, split: str = "train",
                    source: int | None = None) -> GppRecord:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    oracle = bfs_oracle(graph)
    feats = rng.random((graph.n, 1))
    if task == "diameter":
        targets = np.array([float(oracle.diameter)])
    elif task == "eccentricity":
        targets = oracle.ecc.astype(float)
    else:
        s = int(rng.integers(graph.n)) if source is None else int(source)
        onehot = np.zeros((graph.n, 1))
        onehot[s] = 1.0
        feats = np.hstack([feats, onehot])
        targets = oracle.dist[s].astype(float)
    return GppRecord(graph, feats, targets, split)


def gen_gpp_dataset(task: str, count: int, n_range: Sequence[int] = (25, 35), seed: int = 0,
                    split_fractions: Sequence[float] = (0.7, 0.15, 0.15)) -> GppDataset:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    lo, hi = int(n_range[0]), int(n_range[1])
    if lo > hi or lo < 2:
        raise ValueError(f"invalid node range {n_range}")
    counts = split_counts(count, split_fractions)
    tags = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
    rng = np.random.default_rng(seed)
    records = []
    for tag in tags:
        g = _sample_gpp_graph(int(rng.integers(lo, hi + 1)), rng)
        records.append(make_gpp_record(g, task, rng, tag))
    return GppDataset(task, tuple(records))


@dataclass(frozen=True)
class TemporalDataset:
    signal: np.ndarray  # (length, n, channels)
    horizon: int

    @property
    def inputs(self) -> np.ndarray:
        return self.signal[: len(self.signal) - self.horizon]

    @property
    def targets(self) -> np.ndarray:
        return self.signal[self.horizon:]

    def __len__(self) -> int:
        return len(self.signal) - self.horizon


def gen_temporal_dataset(graph: Graph, horizon: int = 1, length: int = 64, seed: int = 0,
                         channels: int = 1, noise: float = 0.05) -> TemporalDataset:
    """Heat diffusion on the shift operator: x_{t+1} = A x_t + noise."""
    if not length > horizon >= 1:
        raise ValueError("need length > horizon >= 1")
    rng = np.random.default_rng(seed)
    a = build_gso(graph).matrix
    x = np.empty((length, graph.n, channels))
    x[0] = rng.standard_normal((graph.n, channels))
    for t in range(length - 1):
        x[t + 1] = a @ x[t] + noise * rng.standard_normal((graph.n, channels))
    return TemporalDataset(x, horizon)
