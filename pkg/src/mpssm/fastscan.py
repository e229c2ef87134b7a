"""Diagonalized complex-valued MP-SSM block.

With ``A = P diag(lam) P^T`` and ``W = V diag(sigma) V^-1`` the final state of a
block becomes ``Z = sum_i diag(lam)^i  U_hat_{k+1-i} B_hat  diag(sigma)^i`` in
rotated coordinates, with ``U_hat = P^T U``, ``B_hat = B V`` and the readout
``act(Re(P Z W1_hat) + b1) W2 + b2`` where ``W1_hat = V^-1 W1``. Only powers of
diagonal matrices are needed, so all ``k + 1`` terms can be formed at once and
reduced with a prefix sum.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import Gso
from .linalg import frobenius_norm, general_eig, sym_eig
from .model import BlockParams, NodeSequence, activation, glorot

DEFAULT_MEMORY_BUDGET = 512 * 2 ** 20


class MemoryBudgetError(MemoryError):
    pass


def gso_fingerprint(gso: Gso) -> str:
    m = gso.matrix
    h = hashlib.sha256(f"n={m.shape[0]};".encode())
    h.update(np.asarray(m.indptr, dtype=np.int64).tobytes())
    h.update(np.asarray(m.indices, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class DiagGso:
    eigenvalues: np.ndarray = field(repr=False)
    P: np.ndarray = field(repr=False)
    fingerprint: str = ""

    @property
    def n(self) -> int:
        return len(self.eigenvalues)

    def to_json(self) -> dict:
        return {"fingerprint": self.fingerprint, "n": self.n,
                "eigenvalues": self.eigenvalues.tolist(), "P": self.P.ravel().tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "DiagGso":
        n = int(obj["n"])
        return cls(np.asarray(obj["eigenvalues"], dtype=float),
                   np.asarray(obj["P"], dtype=float).reshape(n, n), obj["fingerprint"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "DiagGso":
        return cls.from_json(json.loads(Path(path).read_text()))


_CACHE: dict[str, DiagGso] = {}


def precompute_gso_eig(gso: Gso, method: str = "jacobi", cache: dict | None = _CACHE) -> DiagGso:
    """Eigendecomposition of the shift operator, validated and cached by fingerprint."""
    fp = gso_fingerprint(gso)
    if cache is not None and fp in cache:
        return cache[fp]
    if gso.eig is not None:
        lam, p = gso.eig
    else:
        lam, p = sym_eig(gso.dense(), method=method)
    a = gso.dense()
    resid = frobenius_norm(p @ np.diag(lam) @ p.T - a)
    if resid > 1e-8 * frobenius_norm(a):
        raise ArithmeticError(f"eigendecomposition residual {resid:.3e} too large")
    if lam.max() > 1 + 1e-9 or lam.min() < -1 - 1e-9:
        raise ArithmeticError("shift operator spectrum outside [-1, 1]")
    diag = DiagGso(lam, p, fp)
    if cache is not None:
        cache[fp] = diag
    return diag


def block_diag_eig(diags) -> tuple[np.ndarray, sp.csr_matrix]:
    """Eigenpairs of a disjoint union: concatenated eigenvalues, block-diagonal P."""
    lam = np.concatenate([d.eigenvalues for d in diags])
    return lam, sp.block_diag([d.P for d in diags], format="csr")


@dataclass
class FastBlockParams:
    sigma: np.ndarray
    b_hat: np.ndarray
    w1_hat: np.ndarray
    w2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    mode: str = "merged"
    v: np.ndarray | None = None
    v_inv: np.ndarray | None = None
    activation: str = "relu"

    def __post_init__(self):
        if self.mode not in ("exact", "merged"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "exact" and (self.v is None or self.v_inv is None):
            raise ValueError("exact mode needs V and V^-1")
        c = len(self.sigma)
        if self.b_hat.shape[1] != c or self.w1_hat.shape[0] != c:
            raise ValueError("B_hat / W1_hat do not match the diagonal size")

    @property
    def in_dim(self) -> int:
        return self.b_hat.shape[0]


def to_exact_fast(params: BlockParams, cond_max: float = 1e8) -> FastBlockParams:
    """Diagonalize ``W`` and fold ``V`` into ``B`` and ``V^-1`` into ``W1``."""
    w = params.W
    if np.allclose(w, w.T, rtol=0, atol=1e-14 * max(np.abs(w).max(), 1.0)):
        sig, v = sym_eig(w)
        v_inv = v.T
    else:
        sig, v, v_inv = general_eig(w, cond_max)
    return FastBlockParams(
        sigma=sig, b_hat=params.B @ v, w1_hat=v_inv @ params.W1, w2=params.W2,
        b1=params.b1, b2=params.b2, mode="exact", v=v, v_inv=v_inv,
        activation=params.activation)


def init_merged_params(in_dim: int, state_dim: int, hidden: int, out_dim: int, r_min: float = 0.9,
                       r_max: float = 0.999, seed: int | np.random.Generator = 0,
                       activation: str = "relu") -> FastBlockParams:
    """Learnable complex parameters: ``sigma = r e^{i theta}`` on a ring, complex Glorot ``B_hat``/``W1_hat``."""
    if not 0.0 < r_min <= r_max <= 1.0:
        raise ValueError(f"need 0 < r_min <= r_max <= 1, got ({r_min}, {r_max})")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    r = rng.uniform(r_min, r_max, state_dim)
    theta = rng.uniform(0.0, 2 * np.pi, state_dim)

    def cglorot(fi, fo):
        return (glorot(rng, fi, fo) + 1j * glorot(rng, fi, fo)) / np.sqrt(2.0)

    return FastBlockParams(
        sigma=r * np.exp(1j * theta), b_hat=cglorot(in_dim, state_dim),
        w1_hat=cglorot(state_dim, hidden), w2=glorot(rng, hidden, out_dim),
        b1=np.zeros(hidden), b2=np.zeros(out_dim), mode="merged", activation=activation)


def geometric_power_sum(ratio: np.ndarray, count: int) -> np.ndarray:
    """``sum_{i < count} ratio**i`` elementwise by doubling (log2(count) steps, no division)."""
    ratio = np.asarray(ratio)
    result = np.zeros_like(ratio)
    offset = np.ones_like(ratio)
    block_sum = np.ones_like(ratio)
    block_pow = ratio.copy()
    m = int(count)
    while m:
        if m & 1:
            result = result + offset * block_sum
            offset = offset * block_pow
        m >>= 1
        if m:
            block_sum = block_sum * (1 + block_pow)
            block_pow = block_pow * block_pow
    return result


def readout(p: np.ndarray, z: np.ndarray, params: FastBlockParams) -> np.ndarray:
    """``act(Re(P Z W1_hat) + b1) W2 + b2``; ``z`` may carry a leading step axis."""
    h = np.real(np.matmul(p, z) @ params.w1_hat) + params.b1
    return activation(params.activation)(h) @ params.w2 + params.b2


def scan_states(diag: DiagGso, params: FastBlockParams, seq: NodeSequence,
                memory_budget: int = DEFAULT_MEMORY_BUDGET) -> np.ndarray:
    """All-terms prefix sum over the step axis; returns ``(k+1, n, c)`` complex.

    Entry ``t`` is ``sum_{i<=t} lam^i U_hat_{k+1-i} B_hat sigma^i``. The last
    entry is the final rotated state in every mode; earlier entries equal the
    true intermediate states only for constant (static) input.
    """
    steps, n, c = seq.k + 1, seq.n, len(params.sigma)
    need = steps * n * c * 16
    if need > memory_budget:
        raise MemoryBudgetError(
            f"scan tensor needs {need / 2**20:.1f} MiB > budget {memory_budget / 2**20:.1f} MiB; "
            "use the sequential implementation or a larger budget")
    u = seq.array()
    u_hat = np.einsum("nm,tmc->tnc", diag.P.T, u) if seq.mode == "temporal" \
        else np.broadcast_to(diag.P.T @ u[0], (steps,) + u[0].shape)
    xb = u_hat[::-1] @ params.b_hat
    powers = np.arange(steps)
    lam_pows = np.power.outer(diag.eigenvalues, powers).T  # (steps, n)
    sig_pows = np.power.outer(params.sigma, powers).T  # (steps, c)
    scaled = lam_pows[:, :, None] * xb * sig_pows[:, None, :]
    return np.cumsum(scaled, axis=0)


def final_state(diag: DiagGso, params: FastBlockParams, seq: NodeSequence) -> np.ndarray:
    """Final rotated state for constant input: ``(P^T U B_hat) * sum_i (lam sigma)^i``."""
    if seq.mode != "static":
        raise ValueError("closed-form reduction needs a constant input sequence")
    xb = (diag.P.T @ seq.steps[0]) @ params.b_hat
    return xb * geometric_power_sum(np.multiply.outer(diag.eigenvalues, params.sigma), seq.k + 1)


def fast_forward(diag: DiagGso, params: FastBlockParams, seq: NodeSequence,
                 return_sequence: bool = False, strategy: str = "auto",
                 memory_budget: int = DEFAULT_MEMORY_BUDGET) -> np.ndarray:
    """Block output from the diagonalized form.

    ``strategy="scan"`` materializes every scaled term and prefix-sums them;
    ``"auto"`` uses the logarithmic-depth geometric reduction when the input
    is static and only the final output is wanted, the scan otherwise.
    With ``return_sequence`` the decoded prefix sequence ``(k+1, n, c_out)``
    is returned (valid intermediate outputs only in static mode).
    """
    if diag.n != seq.n:
        raise ValueError(f"eigenbasis has {diag.n} nodes, features have {seq.n} rows")
    if seq.steps[0].shape[1] != params.in_dim:
        raise ValueError(f"features have {seq.steps[0].shape[1]} channels, B_hat expects {params.in_dim}")
    if strategy not in ("auto", "scan", "closed"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "closed" and (return_sequence or seq.mode != "static"):
        raise ValueError("closed-form strategy only yields the final static output")
    if not return_sequence and seq.mode == "static" and strategy != "scan":
        return readout(diag.P, final_state(diag, params, seq), params)
    z = scan_states(diag, params, seq, memory_budget)
    if return_sequence:
        return readout(diag.P, z, params)
    return readout(diag.P, z[-1], params)
