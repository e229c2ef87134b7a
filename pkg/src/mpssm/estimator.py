"""scikit-learn style regressor over graph samples."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from .graph import GppDataset, GppRecord, Graph
from .model import predict
from .train import TrainConfig, train_model


def check_graph_samples(X, in_dim: int | None = None) -> list[tuple[Graph, np.ndarray]]:
    """Validate ``X`` as a sequence of ``(Graph, features)`` pairs with finite 2-D features."""
    if isinstance(X, tuple) and len(X) == 2 and isinstance(X[0], Graph):
        raise TypeError("X must be a sequence of (graph, features) pairs, not a single pair")
    out = []
    for idx, sample in enumerate(X):
        try:
            graph, feats = sample
        except (TypeError, ValueError):
            raise TypeError(f"sample {idx} is not a (graph, features) pair") from None
        if not isinstance(graph, Graph):
            raise TypeError(f"sample {idx}: expected a Graph, got {type(graph).__name__}")
        feats = check_array(feats, dtype=np.float64)
        if feats.shape[0] != graph.n:
            raise ValueError(f"sample {idx}: {feats.shape[0]} feature rows for a {graph.n}-node graph")
        if in_dim is not None and feats.shape[1] != in_dim:
            raise ValueError(f"sample {idx}: expected {in_dim} feature channels, got {feats.shape[1]}")
        out.append((graph, feats))
    if not out:
        raise ValueError("X contains no samples")
    return out


def check_graph_targets(y, samples, node_level: bool) -> list[np.ndarray]:
    if len(y) != len(samples):
        raise ValueError(f"got {len(y)} targets for {len(samples)} samples")
    out = []
    for idx, (t, (graph, _)) in enumerate(zip(y, samples)):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64)).ravel()
        want = graph.n if node_level else 1
        if t.shape[0] != want:
            raise ValueError(f"sample {idx}: expected {want} target value(s), got {t.shape[0]}")
        if not np.all(np.isfinite(t)):
            raise ValueError(f"sample {idx}: non-finite target")
        out.append(t)
    return out


class MPSSMRegressor(RegressorMixin, BaseEstimator):
    """Graph- or node-level regressor wrapping :func:`train_model`.

    ``X`` is a sequence of ``(Graph, features)`` pairs. ``y`` holds one scalar
    per graph (``level="graph"``) or one value per node (``level="node"``).
    A ``validation_fraction`` of the samples is held out for checkpoint
    selection.
    """

    def __init__(self, architecture="mpssm", implementation="sequential", level="graph", k=10,
                 hidden=20, blocks=2, lr=0.003, weight_decay=1e-6, dropout=0.0, epochs=100,
                 batch_size=32, patience=None, validation_fraction=0.15, random_state=0):
        self.architecture = architecture
        self.implementation = implementation
        self.level = level
        self.k = k
        self.hidden = hidden
        self.blocks = blocks
        self.lr = lr
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            task="diameter" if self.level == "graph" else "eccentricity",
            architecture=self.architecture, implementation=self.implementation, lr=self.lr,
            weight_decay=self.weight_decay, dropout=self.dropout, k=self.k, hidden=self.hidden,
            blocks=self.blocks, epochs=self.epochs, batch_size=self.batch_size,
            patience=self.patience, seed=seed)

    def fit(self, X, y):
        if self.level not in ("graph", "node"):
            raise ValueError(f"level must be 'graph' or 'node', got {self.level!r}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        samples = check_graph_samples(X)
        dims = {f.shape[1] for _, f in samples}
        if len(dims) != 1:
            raise ValueError(f"inconsistent feature widths {sorted(dims)}")
        targets = check_graph_targets(y, samples, self.level == "node")
        if len(samples) < 2:
            raise ValueError("need at least two samples (one for validation)")
        rng = check_random_state(self.random_state)
        n_val = min(len(samples) - 1, max(1, int(round(self.validation_fraction * len(samples)))))
        val_idx = set(rng.permutation(len(samples))[:n_val].tolist())
        records = tuple(GppRecord(g, f, t, "val" if i in val_idx else "train")
                        for i, ((g, f), t) in enumerate(zip(samples, targets)))
        config = self._config(int(rng.randint(2 ** 31 - 1)))
        self.model_, self.history_ = train_model(config, GppDataset(config.task, records))
        self.n_features_in_ = dims.pop()
        return self

    def predict(self, X):
        """One value per graph, or a list of per-node arrays for ``level="node"``."""
        check_is_fitted(self, "model_")
        samples = check_graph_samples(X, self.n_features_in_)
        preds = [np.ravel(predict(self.model_, g, f)) for g, f in samples]
        if self.level == "graph":
            return np.array([p[0] for p in preds])
        return preds

    def score(self, X, y, sample_weight=None):
        """R^2 over all predicted values (graphs, or nodes pooled across graphs)."""
        from sklearn.metrics import r2_score

        pred = self.predict(X)
        if self.level == "node":
            pred = np.concatenate(pred)
            y = np.concatenate([np.ravel(t) for t in y])
        return r2_score(np.asarray(y, dtype=float).ravel(), pred, sample_weight=sample_weight)
