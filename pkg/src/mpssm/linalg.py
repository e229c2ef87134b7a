"""Dense matrix kernels: eigendecompositions, powers and norms."""

from __future__ import annotations

import numpy as np


class LinalgError(ArithmeticError):
    pass


class NotSymmetricError(LinalgError, ValueError):
    pass


class ConvergenceError(LinalgError):
    pass


class NearDefectiveError(LinalgError):
    """Eigenvector matrix too ill-conditioned; use the sequential recurrence instead."""


def _square(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def sym_eig(a, tol: float = 1e-12, max_sweeps: int = 100, method: str = "jacobi"):
    """Eigendecomposition of a real symmetric matrix.

    Returns ``(w, P)`` with ``w`` sorted descending and ``P`` orthogonal, so
    that ``P @ diag(w) @ P.T`` reconstructs ``a``. The default method is cyclic
    Jacobi; ``method="lapack"`` delegates to ``numpy.linalg.eigh``.
    """
    a = _square(a).astype(float)
    scale = np.linalg.norm(a)
    if np.abs(a - a.T).max(initial=0.0) > 1e-12 * max(scale, 1.0):
        raise NotSymmetricError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    if method == "lapack":
        w, v = np.linalg.eigh(a)
    elif method == "jacobi":
        w, v = _jacobi(a, tol * scale, max_sweeps)
    else:
        raise ValueError(f"unknown method {method!r}")
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def _off_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a - np.diag(np.diag(a))))


def _jacobi(a: np.ndarray, threshold: float, max_sweeps: int):
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        if _off_norm(a) <= threshold:
            return np.diag(a).copy(), v
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    off = _off_norm(a)
    if off <= threshold:
        return np.diag(a).copy(), v
    raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps (off={off:.3e})")


def sort_eigenvalues(w: np.ndarray) -> np.ndarray:
    """Indices ordering complex eigenvalues by descending real part, then imaginary part."""
    w = np.asarray(w)
    return np.lexsort((-np.round(w.imag, 12), -np.round(w.real, 12)))


def general_eig(a, cond_max: float = 1e8):
    """Diagonalize a general real matrix: ``a = V diag(w) V^-1``.

    Returns ``(w, V, V_inv)``, complex. Raises ``NearDefectiveError`` when the
    condition number of ``V`` exceeds ``cond_max``.
    """
    a = _square(a).astype(float)
    w, v = np.linalg.eig(a)
    order = sort_eigenvalues(w)
    w, v = w[order].astype(complex), v[:, order].astype(complex)
    cond = np.linalg.cond(v)
    if not np.isfinite(cond) or cond > cond_max:
        raise NearDefectiveError(
            f"eigenvector condition number {cond:.3e} exceeds {cond_max:.1e}; "
            "use the sequential implementation")
    return w, v, np.linalg.inv(v)


def spectral_norm(a, tol: float = 1e-10, max_iter: int = 1000, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``a^T a``."""
    a = np.asarray(a)
    if a.size == 0:
        return 0.0
    scale = np.abs(a).max()
    if scale == 0.0:
        return 0.0
    m = a / scale  # keeps W^k-type inputs away from overflow
    x = np.random.default_rng(seed).standard_normal(m.shape[1])
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(max_iter):
        y = m.conj().T @ (m @ x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        new = np.sqrt(float(np.real(np.vdot(x, y))))
        x = y / ny
        if abs(new - est) <= tol * new:
            est = new
            break
        est = new
    return float(est * scale)


def mat_power(a, t: int) -> np.ndarray:
    """``a**t`` by repeated squaring; ``t = 0`` gives the identity."""
    a = _square(a)
    if t < 0:
        raise ValueError("negative powers are not supported")
    result = np.eye(a.shape[0], dtype=a.dtype)
    base = a.copy()
    while t:
        if t & 1:
            result = result @ base
        t >>= 1
        if t:
            base = base @ base
    return result


def frobenius_norm(a) -> float:
    a = np.asarray(a)
    return float(np.sqrt(np.sum(np.abs(a) ** 2)))
