"""Soft Bayesian context trees for real-valued time series.

Context trees whose inner nodes route each time step softly (softmax over
linear functions of recent lags) and whose nodes carry Normal-Gamma
autoregressive models. Learning is variational; the gating weights are
MAP-estimated with damped Newton steps.
"""

from .config import RunConfig, load_config, load_preset
from .data import TimeSeriesDataset, load_csv, simulate_lstar, simulate_setar
from .gating import GatingParams, GatingPrior, eta_schedule, gate_probs, path_log_prob, softmax
from .inference import FitState, Responsibilities, fit, sequential_update
from .leaf import LeafPosterior, LeafPrior
from .predict import Forecast, evaluate_mse, predict, report_map_model
from .tree import Subtree, TreePosterior, TreePrior, TreeShape, map_tree

__version__ = "0.1.0"

__all__ = [
    "FitState",
    "Forecast",
    "GatingParams",
    "GatingPrior",
    "LeafPosterior",
    "LeafPrior",
    "Responsibilities",
    "RunConfig",
    "Subtree",
    "TimeSeriesDataset",
    "TreePosterior",
    "TreePrior",
    "TreeShape",
    "eta_schedule",
    "evaluate_mse",
    "fit",
    "gate_probs",
    "load_config",
    "load_csv",
    "load_preset",
    "map_tree",
    "path_log_prob",
    "predict",
    "report_map_model",
    "sequential_update",
    "simulate_lstar",
    "simulate_setar",
    "softmax",
]
