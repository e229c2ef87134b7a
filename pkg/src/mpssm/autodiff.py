"""A small reverse-mode tape over the fixed set of ops the models use.

Complex values follow the usual convention for real losses: the stored
gradient of a complex array ``z`` is ``dL/dRe(z) + 1j * dL/dIm(z)``, so real
and imaginary parts behave as independent real parameters.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .model import ACTIVATIONS, LN_EPS


class Node:
    __slots__ = ("value", "grad", "parents", "fn", "vjp", "requires_grad", "name")

    def __init__(self, value, parents=(), fn=None, vjp=None, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.fn = fn
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.name or ''} shape={self.value.shape})"


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    """Records ops in execution order; ``backward`` walks them in reverse."""

    def __init__(self):
        self.nodes: list[Node] = []

    # -- leaves
    def param(self, value, name=None) -> Node:
        return Node(np.asarray(value), requires_grad=True, name=name)

    def const(self, value) -> Node:
        return Node(value if sp.issparse(value) else np.asarray(value))

    def _op(self, fn, vjp, *parents) -> Node:
        value = fn(*(p.value for p in parents))
        node = Node(value, parents, fn, vjp, any(p.requires_grad for p in parents))
        self.nodes.append(node)
        return node

    # -- ops
    def matmul(self, a: Node, b: Node) -> Node:
        def vjp(g, av, bv):
            return g @ np.conj(bv).T, np.conj(av).T @ g
        return self._op(lambda x, y: x @ y, vjp, a, b)

    def spmm(self, s, x: Node, st=None) -> Node:
        """Constant (sparse or dense) real matrix times a node; ``st`` may pass a precomputed transpose."""
        if st is None:
            st = s.T.tocsr() if sp.issparse(s) else np.asarray(s).T

        def vjp(g, xv):
            return (st @ g,)
        return self._op(lambda xv: s @ xv, vjp, x)

    def add(self, a: Node, b: Node) -> Node:
        def vjp(g, av, bv):
            return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)
        return self._op(lambda x, y: x + y, vjp, a, b)

    def mul(self, a: Node, b: Node) -> Node:
        def vjp(g, av, bv):
            return _unbroadcast(g * np.conj(bv), av.shape), _unbroadcast(g * np.conj(av), bv.shape)
        return self._op(lambda x, y: x * y, vjp, a, b)

    def scale(self, a: Node, c) -> Node:
        """Multiply by a constant array (dropout masks, fixed weights)."""
        c = np.asarray(c)

        def vjp(g, av):
            return (_unbroadcast(g * np.conj(c), av.shape),)
        return self._op(lambda x: x * c, vjp, a)

    def real(self, a: Node) -> Node:
        def vjp(g, av):
            return (g.astype(av.dtype),)
        return self._op(np.real, vjp, a)

    def act(self, a: Node, name: str) -> Node:
        if name == "identity":
            return a
        f, df = ACTIVATIONS[name]

        def vjp(g, av):
            return (g * df(av),)
        return self._op(f, vjp, a)

    def layer_norm(self, x: Node, gamma: Node, beta: Node) -> Node:
        def fn(xv, gv, bv):
            mu = xv.mean(axis=-1, keepdims=True)
            var = xv.var(axis=-1, keepdims=True)
            return (xv - mu) / np.sqrt(var + LN_EPS) * gv + bv

        def vjp(g, xv, gv, bv):
            mu = xv.mean(axis=-1, keepdims=True)
            inv = 1.0 / np.sqrt(xv.var(axis=-1, keepdims=True) + LN_EPS)
            xhat = (xv - mu) * inv
            gx_hat = g * gv
            gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
            return gx, (g * xhat).sum(axis=0), g.sum(axis=0)
        return self._op(fn, vjp, x, gamma, beta)

    def power_sum(self, lam: np.ndarray, sigma: Node, k: int) -> Node:
        """``G[n, c] = sum_{i=0..k} (lam_n sigma_c)^i``, differentiable in ``sigma``."""
        lam = np.asarray(lam, dtype=float)
        powers = np.arange(k + 1)
        lam_pows = np.power.outer(lam, powers)  # (n, k+1)

        def fn(sv):
            return lam_pows @ np.power.outer(sv, powers).T

        def vjp(g, sv):
            # d/dsigma sigma^i = i sigma^(i-1); holomorphic, so conjugate the derivative
            dsig = powers[1:] * np.power.outer(sv, powers[:-1])  # (c, k)
            dG = lam_pows[:, 1:] @ dsig.T  # (n, c)
            return ((g * np.conj(dG)).sum(axis=0),)
        return self._op(fn, vjp, sigma)

    def weighted_sq_error(self, pred: Node, target: np.ndarray, weights: np.ndarray) -> Node:
        """``sum_r w_r * sum_c (pred - target)^2`` over rows ``r``."""
        target = np.asarray(target, dtype=float)
        w = np.asarray(weights, dtype=float).reshape(-1, 1)

        def fn(pv):
            return np.asarray(np.sum(w * (pv - target) ** 2))

        def vjp(g, pv):
            return (g * 2.0 * w * (pv - target),)
        return self._op(fn, vjp, pred)

    # -- reverse pass
    def backward(self, out: Node, grad=None) -> None:
        for node in self.nodes:
            node.grad = None
            for p in node.parents:
                p.grad = None
        out.grad = np.ones_like(out.value) if grad is None else np.asarray(grad)
        for node in reversed(self.nodes):
            if node.grad is None or not node.requires_grad:
                continue
            gs = node.vjp(node.grad, *(p.value for p in node.parents))
            for p, g in zip(node.parents, gs):
                if not p.requires_grad:
                    continue
                if not np.iscomplexobj(p.value) and np.iscomplexobj(g):
                    g = g.real
                p.grad = g if p.grad is None else p.grad + g

    def replay(self) -> float:
        """Recompute every recorded op from its parents; max abs deviation from the stored values."""
        worst = 0.0
        for node in self.nodes:
            fresh = node.fn(*(p.value for p in node.parents))
            worst = max(worst, float(np.abs(np.asarray(fresh) - node.value).max(initial=0.0)))
        return worst
