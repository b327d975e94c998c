"""Posterior-mean forecasts, MAP-model reports and the predict-then-update MSE protocol."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .data import TimeSeriesDataset
from .errors import ConfigError, DataError
from .gating import gate_probs
from .inference import FitState, fit, sequential_update
from .tree import map_tree


@dataclass
class Forecast:
    value: float
    node_weights: np.ndarray = field(repr=False)
    node_means: np.ndarray = field(repr=False)

    def contributions(self) -> dict[int, float]:
        """Node id -> weight * local linear prediction, for nodes with non-zero weight."""
        c = self.node_weights * self.node_means
        return {int(s): float(c[s]) for s in np.flatnonzero(self.node_weights)}


def predict(state: FitState, x_A, x_L) -> Forecast:
    """Posterior-mean one-step forecast averaged over subtrees and soft routings.

    ``zeta_s = (1 - g'_s) mu'_s . x_A + g'_s sum_m sigma_m(W_s x_L) zeta_{s_m}``
    at inner nodes and ``mu'_s . x_A`` at the deepest level. The same value
    is the convex combination ``sum_s weight_s * mu'_s . x_A`` with weights
    ``(1 - g'_s) prod_{path} g' sigma``, which is what is computed here.
    """
    cfg = state.config
    x_A = np.asarray(x_A, dtype=float).ravel()
    x_L = np.asarray(x_L, dtype=float).ravel()
    if x_A.shape[0] != cfg.K + 1 or x_L.shape[0] != cfg.J + 1:
        raise DataError(f"regressors must have lengths K+1={cfg.K + 1} and J+1={cfg.J + 1}")
    shape = state.shape
    g = state.tree_post.g_prime
    means = state.node_post.mu_p @ x_A
    reach = np.ones(shape.n_nodes)
    for s in shape.inner_nodes:
        gates = gate_probs(state.gating.W[s], x_L, hard=cfg.hard)
        reach[shape.children(s)] = reach[s] * g[s] * gates
    weights = reach * (1.0 - g)
    return Forecast(float(weights @ means), weights, means)


def zeta(state: FitState, x_A, x_L, s: int = 0) -> float:
    """Direct recursive evaluation of the forecast from node ``s``; used as a cross-check."""
    shape = state.shape
    g = state.tree_post.g_prime[s]
    local = float(state.node_post.mu_p[s] @ np.asarray(x_A, dtype=float))
    if not shape.is_inner(s):
        return local
    gates = gate_probs(state.gating.W[s], x_L, hard=state.config.hard)
    return (1 - g) * local + g * sum(gates[m] * zeta(state, x_A, x_L, ch) for m, ch in enumerate(shape.children(s)))


# ---------------------------------------------------------------------------
# MAP model report


def gate_boundaries(W_s, lag: int) -> list[float | None]:
    """Values of lag ``lag`` where adjacent logits ``m`` and ``m+1`` cross, other lags at 0."""
    W_s = np.asarray(W_s, dtype=float)
    out = []
    for m in range(W_s.shape[0] - 1):
        d = W_s[m] - W_s[m + 1]
        out.append(None if d[lag] == 0 else float(-d[0] / d[lag]))
    return out


def _boundary_lag(state: FitState, s: int) -> int | None:
    cfg = state.config
    if cfg.restricted:
        return int(state.shape.depth[s]) + 1
    if cfg.J == 1:
        return 1
    return None


def report_map_model(state: FitState) -> dict:
    """MAP subtree with per-leaf posterior summaries and per-inner-node gate boundaries."""
    tree = map_tree(state.tree_post)
    post = state.node_post
    depth = state.shape.depth
    leaves = []
    for s in tree.leaves:
        leaves.append(
            {
                "node": int(s),
                "depth": int(depth[s]),
                "mu_prime": post.mu_p[s].tolist(),
                "a_prime": float(post.a_p[s]),
                "b_prime": float(post.b_p[s]),
                "precision_mean": float(post.a_p[s] / post.b_p[s]),
                "weight": float(post.trace_q[s]),
            }
        )
    inner = []
    for s in tree.inner:
        lag = _boundary_lag(state, s)
        entry = {
            "node": int(s),
            "depth": int(depth[s]),
            "g_prime": float(state.tree_post.g_prime[s]),
            "weights": state.gating.W[s].tolist(),
        }
        if lag is not None:
            entry["lag"] = lag
            entry["boundaries"] = gate_boundaries(state.gating.W[s], lag)
        inner.append(entry)
    return {
        "map_inner": [int(s) for s in tree.inner],
        "map_leaves": [int(s) for s in tree.leaves],
        "log_posterior": state.tree_post.log_prob(tree),
        "leaves": leaves,
        "inner": inner,
    }


def format_map_report(report: dict) -> str:
    lines = [f"MAP tree: {len(report['map_leaves'])} leaves, inner nodes {report['map_inner']}"]
    lines.append(f"{'node':>6} {'depth':>5} {'a/b':>12}  mu'")
    for leaf in report["leaves"]:
        mu = " ".join(f"{v: .4f}" for v in leaf["mu_prime"])
        lines.append(f"{leaf['node']:>6} {leaf['depth']:>5} {leaf['precision_mean']:>12.4f}  {mu}")
    for node in report["inner"]:
        if "boundaries" in node:
            b = ", ".join("n/a" if v is None else f"{v:.4f}" for v in node["boundaries"])
            lines.append(f"inner {node['node']} (depth {node['depth']}): lag {node['lag']} boundaries {b}")
        else:
            lines.append(f"inner {node['node']} (depth {node['depth']}): weights {node['weights']}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MSEReport:
    mse: float
    errors: np.ndarray
    predictions: np.ndarray
    actual: np.ndarray
    n_train: int
    runtime: float
    converged: bool
    iterations: int
    thresholds: list | None = None

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "mse": self.mse,
            "n_train": self.n_train,
            "n_test": int(self.errors.shape[0]),
            "converged": self.converged,
            "iterations": self.iterations,
            "thresholds": self.thresholds,
            "squared_errors": self.errors.tolist(),
        }
        if include_timing:
            d["runtime_seconds"] = self.runtime
        return d

    def format(self) -> str:
        return "\n".join(
            [
                f"{'n_train':<12}{self.n_train}",
                f"{'n_test':<12}{self.errors.shape[0]}",
                f"{'iterations':<12}{self.iterations}",
                f"{'converged':<12}{self.converged}",
                f"{'mse':<12}{self.mse:.6g}",
            ]
        )


def evaluate_mse(
    dataset: TimeSeriesDataset,
    config: RunConfig,
    split: float = 0.5,
    sequential: bool = True,
    inner_iters: int | None = None,
) -> MSEReport:
    """Fit on the first ``split`` fraction, then predict and update point by point on the rest."""
    if not 0 < split < 1:
        raise ConfigError("split must lie strictly between 0 and 1")
    n_train = int(math.floor(split * dataset.n))
    if n_train < 1 or n_train >= dataset.n:
        raise DataError(f"series of length {dataset.n} is too short for split {split}")
    start = time.perf_counter()
    train, _ = dataset.split(n_train)
    state = fit(train, config)
    XA = dataset.XA(config.K)
    XL = dataset.XL(config.J)
    preds = np.empty(dataset.n - n_train)
    for i, t in enumerate(range(n_train, dataset.n)):
        preds[i] = predict(state, XA[t], XL[t]).value
        if sequential:
            sequential_update(state, dataset.x[t], XA[t], XL[t], inner_iters)
    actual = dataset.x[n_train:]
    errors = (actual - preds) ** 2
    return MSEReport(
        mse=float(errors.mean()),
        errors=errors,
        predictions=preds,
        actual=actual,
        n_train=n_train,
        runtime=time.perf_counter() - start,
        converged=state.converged,
        iterations=state.iteration,
        thresholds=state.config.thresholds,
    )
