"""Message-passing state-space models on graphs.

Linear graph recurrences ``X_{t+1} = A X_t W + U_{t+1} B`` over a normalized
shift operator, their exact sensitivity analysis, a diagonalized fast path,
and a small numpy training stack.
"""

from .estimator import MPSSMRegressor
from .fastscan import DiagGso, fast_forward, precompute_gso_eig, to_exact_fast
from .graph import Graph, Gso, GppDataset, bfs_oracle, build_gso, gen_gpp_dataset, gen_graph
from .model import (BlockParams, DeepModel, GCNModel, block_forward, deep_forward, init_deep_model,
                    init_gcn_model, load_checkpoint, make_input_sequence, predict, save_checkpoint,
                    unfolded_forward)
from .sensitivity import exact_jacobian, finite_diff_jacobian, sensitivity_profile
from .train import TrainConfig, evaluate, train_model

__version__ = "0.1.0"

__all__ = [
    "BlockParams", "DeepModel", "DiagGso", "GCNModel", "GppDataset", "Graph", "Gso", "MPSSMRegressor",
    "TrainConfig", "bfs_oracle", "block_forward", "build_gso", "deep_forward", "evaluate",
    "exact_jacobian", "fast_forward", "finite_diff_jacobian", "gen_gpp_dataset", "gen_graph",
    "init_deep_model", "init_gcn_model", "load_checkpoint", "make_input_sequence", "precompute_gso_eig",
    "predict", "save_checkpoint", "sensitivity_profile", "to_exact_fast", "train_model",
    "unfolded_forward",
]
