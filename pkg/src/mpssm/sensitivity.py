"""Jacobians and sensitivities of the linear graph recurrence.

For ``X_{t+1} = A X_t W + U_{t+1} B`` the Jacobian of node ``i`` at step ``t``
with respect to node ``j`` at step ``s`` is ``(A^(t-s))_ij (W^T)^(t-s)``. The
functions here evaluate that closed form, check it against finite differences,
and test the lower bounds and deep-regime limits that follow from it.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import Graph, Gso, bfs_oracle, build_gso
from .linalg import frobenius_norm, mat_power, spectral_norm, sym_eig
from .model import BlockParams, relu

ALL_PAIRS_LIMIT = 128
DEEP_DELTA = 200


def _dense(gso) -> np.ndarray:
    if isinstance(gso, Gso):
        return gso.dense()
    return gso.toarray() if hasattr(gso, "toarray") else np.asarray(gso, dtype=float)


def exact_jacobian(gso, w: np.ndarray, i: int, j: int, delta: int) -> np.ndarray:
    """``(A^delta)_ij * (W^T)^delta``; entry ``[a, b]`` is d X_t[i, a] / d X_s[j, b]."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    a = _dense(gso)
    return mat_power(a, delta)[i, j] * mat_power(np.asarray(w).T, delta)


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Jacobian of ``f`` at ``x`` by central differences; column ``b`` is d f / d x_b."""
    x = np.asarray(x, dtype=float)
    cols = []
    for b in range(x.size):
        e = np.zeros_like(x)
        e.flat[b] = h
        cols.append((np.ravel(f(x + e)) - np.ravel(f(x - e))) / (2 * h))
    return np.stack(cols, axis=1)


def run_recurrence(a, w: np.ndarray, x_s: np.ndarray, inputs) -> np.ndarray:
    """Apply ``X <- A X W + U B`` once per entry of ``inputs`` (already multiplied by ``B``)."""
    x = x_s
    for ub in inputs:
        x = a @ (x @ w) + ub
    return x


def finite_diff_jacobian(gso, params, i: int, j: int, s: int, t: int, h: float = 1e-5,
                         seed: int = 0) -> np.ndarray:
    """Central-difference Jacobian of node ``i`` at step ``t`` w.r.t. node ``j`` at step ``s``.

    ``params`` is a ``BlockParams`` or a bare recurrence matrix ``W``. The base
    state ``X_s`` and the injected inputs are random; the answer does not
    depend on them because the recurrence is linear.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if t < s:
        raise ValueError("need t >= s")
    w = params.W if isinstance(params, BlockParams) else np.asarray(params, dtype=float)
    a = _dense(gso)
    n, c = a.shape[0], w.shape[0]
    rng = np.random.default_rng(seed)
    x_s = rng.standard_normal((n, c))
    if isinstance(params, BlockParams):
        inputs = [rng.standard_normal((n, params.in_dim)) @ params.B for _ in range(t - s)]
    else:
        inputs = [rng.standard_normal((n, c)) for _ in range(t - s)]

    def node_i_at_t(row_j):
        x = x_s.copy()
        x[j] = row_j
        return run_recurrence(a, w, x, inputs)[i]

    return central_difference(node_i_at_t, x_s[j], h)


def local_sensitivity(gso, w: np.ndarray, i: int, j: int, delta: int) -> float:
    """Spectral norm of the exact Jacobian, as ``|(A^delta)_ij| * ||W^delta||``."""
    a = _dense(gso)
    return abs(mat_power(a, delta)[i, j]) * spectral_norm(mat_power(np.asarray(w), delta))


def spectral_radius(gso) -> float:
    w, _ = sym_eig(_dense(gso))
    return float(np.abs(w).max())


@dataclass
class SensitivityReport:
    delta: int
    n: int
    num_edges: int
    connected: bool
    s_global: float
    s_min: float
    w_power_norm: float
    spectral_radius: float
    bound_global: float
    bound_min: float | None
    global_bound_holds: bool
    min_bound_holds: bool | None
    sampled_pairs: int | None = None
    matrix: np.ndarray | None = field(default=None, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("matrix")
        return d

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)

    def to_text(self) -> str:
        rows = [(k, v) for k, v in self.summary().items()]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)

    def to_csv(self) -> str:
        """Per-pair sensitivities as ``i,j,sensitivity`` rows."""
        if self.matrix is None:
            raise ValueError("report has no per-pair matrix")
        buf = io.StringIO()
        wr = csv.writer(buf)
        wr.writerow(["i", "j", "sensitivity"])
        for i in range(self.matrix.shape[0]):
            for j in range(self.matrix.shape[1]):
                wr.writerow([i, j, repr(float(self.matrix[i, j]))])
        return buf.getvalue()


def sensitivity_profile(graph: Graph, w: np.ndarray, delta: int, sample_pairs: int | None = None,
                        slack: float = 1e-12, seed: int = 0, rho: float | None = None
                        ) -> SensitivityReport:
    """Global / minimum sensitivity at depth ``delta`` and the two lower bounds.

    All ``n^2`` pairs are evaluated for ``n <= 128``; larger graphs need
    ``sample_pairs`` (uniform pairs, global max and min taken over the sample).
    The minimum-sensitivity bound is only reported for connected graphs.
    ``rho`` skips the eigensolve when the spectral radius is already known.
    """
    n = graph.n
    if n > ALL_PAIRS_LIMIT and sample_pairs is None:
        raise ValueError(f"n={n} > {ALL_PAIRS_LIMIT}: pass sample_pairs for sampled mode")
    a = build_gso(graph).dense()
    a_pow = mat_power(a, delta)
    w_norm = spectral_norm(mat_power(np.asarray(w, dtype=float), delta))
    rho = spectral_radius(a) if rho is None else float(rho)
    connected = bfs_oracle(graph).connected
    if sample_pairs is None:
        entries = np.abs(a_pow)
        matrix = entries * w_norm
    else:
        rng = np.random.default_rng(seed)
        ii = rng.integers(0, n, sample_pairs)
        jj = rng.integers(0, n, sample_pairs)
        entries = np.abs(a_pow[ii, jj])
        matrix = None
    s_global = float(entries.max() * w_norm)
    s_min = float(entries.min() * w_norm)
    bound_global = rho ** delta * w_norm / n
    bound_min = 2.0 * w_norm / (n + 2 * graph.num_edges) if connected else None
    return SensitivityReport(
        delta=delta, n=n, num_edges=graph.num_edges, connected=connected,
        s_global=s_global, s_min=s_min, w_power_norm=w_norm, spectral_radius=rho,
        bound_global=bound_global, bound_min=bound_min,
        global_bound_holds=bool(s_global >= bound_global - slack * max(bound_global, 1.0)),
        min_bound_holds=None if bound_min is None else bool(s_min >= bound_min * (1 - 1e-9)),
        sampled_pairs=sample_pairs, matrix=matrix)


def deep_regime_factor(graph: Graph, i: int, j: int) -> float:
    """``sqrt((1+d_i)(1+d_j)) / (|V| + 2|E|)``, the limit of ``(A^delta)_ij``."""
    if not bfs_oracle(graph).connected:
        raise ValueError("deep-regime limit needs a connected graph")
    d = graph.degrees
    return float(np.sqrt((1 + d[i]) * (1 + d[j])) / (graph.n + 2 * graph.num_edges))


def deep_regime_matrix(graph: Graph) -> np.ndarray:
    if not bfs_oracle(graph).connected:
        raise ValueError("deep-regime limit needs a connected graph")
    s = np.sqrt(1.0 + graph.degrees)
    return np.outer(s, s) / (graph.n + 2 * graph.num_edges)


@dataclass
class ConvergenceFit:
    deltas: np.ndarray
    errors: np.ndarray
    fitted_ratio: float
    lambda2: float

    @property
    def relative_gap(self) -> float:
        return abs(self.fitted_ratio - self.lambda2) / self.lambda2


def deep_regime_convergence(graph: Graph, deltas=range(50, 201, 10), floor: float = 1e-13
                            ) -> ConvergenceFit:
    """Fit ``max_ij |(A^delta)_ij - factor_ij| ~ C r^delta`` and compare ``r`` with ``|lambda_2|``.

    Points whose error has reached round-off (below ``floor``) are dropped.
    """
    a = build_gso(graph).dense()
    limit = deep_regime_matrix(graph)
    w, _ = sym_eig(a)
    lam2 = float(np.sort(np.abs(w))[-2]) if len(w) > 1 else 0.0
    deltas = np.asarray(list(deltas))
    errors = np.array([np.abs(mat_power(a, int(d)) - limit).max() for d in deltas])
    keep = errors > floor
    if keep.sum() < 2:
        raise ValueError("deviation hits round-off before two points are available; use smaller deltas")
    slope = np.polyfit(deltas[keep], np.log(errors[keep]), 1)[0]
    return ConvergenceFit(deltas, errors, float(np.exp(slope)), lam2)


@dataclass
class LemmaCheck:
    name: str
    passed: bool
    value: float


def verify_spectrum_lemma(gso: Gso, t_max: int = 64, powers=None) -> list[LemmaCheck]:
    """Spectrum in [-1, 1], ``A d = d`` for ``d = sqrt(1 + deg)``, and
    ``||A^t||_2 = 1`` with ``||A^t||_F >= 1`` for the requested powers."""
    a = gso.dense()
    w, _ = sym_eig(a)
    d = 1.0 / gso.inv_sqrt_deg
    checks = [
        LemmaCheck("eigenvalues_max", bool(w.max() <= 1 + 1e-9), float(w.max())),
        LemmaCheck("eigenvalues_min", bool(w.min() >= -1 - 1e-9), float(w.min())),
        LemmaCheck("fixed_vector", bool(np.abs(a @ d - d).max() <= 1e-9), float(np.abs(a @ d - d).max())),
    ]
    if powers is None:
        powers = [1] + [2 ** e for e in range(1, 64) if 2 ** e <= t_max]
    for t in powers:
        at = mat_power(a, t)
        sn = spectral_norm(at)
        checks.append(LemmaCheck(f"spectral_norm_A^{t}", bool(abs(sn - 1) <= 1e-6), sn))
        fn = frobenius_norm(at)
        checks.append(LemmaCheck(f"frobenius_A^{t}", bool(fn >= 1 - 1e-9), fn))
    return checks


@dataclass
class VanishingResult:
    mean_log2_per_layer: float
    per_trial: np.ndarray


def random_walk(graph: Graph, length: int, rng: np.random.Generator) -> list[int]:
    v = int(rng.integers(graph.n))
    walk = [v]
    for _ in range(length):
        nb = graph.neighbors(v)
        v = int(rng.choice(nb)) if len(nb) else v
        walk.append(v)
    return walk


def vanishing_rate_experiment(graph: Graph, k: int = 16, width: int = 128, trials: int = 20,
                              seed: int = 0, bias: float = 0.0, weight_scale: float = 1.0,
                              mask: str = "message") -> VanishingResult:
    """Per-layer log2 ratio of Jacobian norms, residual ReLU GCN over the linear recurrence.

    Each trial runs a residual GCN ``X <- ReLU(A X W_t + X + bias)`` with
    Gaussian weights (std ``weight_scale / sqrt(width)``) and inputs, picks a
    random walk of length ``k`` and compares ``||prod_t D_t M_t x||`` with
    ``||prod_t M_t x||`` for ``M_t = A_{walk} W_t^T``.

    ``D_t`` is the ReLU derivative along the walk edge. With
    ``mask="message"`` it is taken at the edge message
    ``A[dst, src] X_t[src] W_t + bias``, the term the cross-node derivative
    actually depends on; ``"preactivation"`` uses the full residual
    pre-activation of the destination node instead.
    """
    if mask not in ("message", "preactivation"):
        raise ValueError(f"unknown mask mode {mask!r}")
    if k < 2 and k != 0:
        raise ValueError("need k >= 2 layers to estimate a decay rate")
    if k == 0:
        return VanishingResult(0.0, np.zeros(trials))
    gso = build_gso(graph)
    a = gso.matrix
    a_dense = gso.dense()
    out = []
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        ws = [weight_scale * rng.standard_normal((width, width)) / np.sqrt(width) for _ in range(k)]
        x = rng.standard_normal((graph.n, width))
        walk = random_walk(graph, k, rng)
        masks = []
        for t in range(k):
            pre = a @ (x @ ws[t]) + x + bias
            if mask == "message":
                src, dst = walk[t], walk[t + 1]
                masks.append(a_dense[dst, src] * (x[src] @ ws[t]) + bias > 0)
            else:
                masks.append(pre[walk[t + 1]] > 0)
            x = relu(pre)
        v = rng.standard_normal(width)
        g = v.copy()
        lin = v.copy()
        log_ratio = 0.0
        for t in range(k):
            src, dst = walk[t], walk[t + 1]
            m = a_dense[dst, src] * ws[t].T
            g = masks[t] * (m @ g)
            lin = m @ lin
            # renormalize both to avoid under/overflow, tracking the ratio
            ng, nl = np.linalg.norm(g), np.linalg.norm(lin)
            if ng == 0.0:
                log_ratio = -np.inf
                break
            log_ratio += np.log2(ng) - np.log2(nl)
            g /= ng
            lin /= nl
        out.append(log_ratio / k)
    per_trial = np.asarray(out)
    return VanishingResult(float(per_trial.mean()), per_trial)
