"""JSON model files (schema version 1).

A model file embeds the resolved run config, gating weights and prior,
every node posterior, the tree posterior with its MAP leaves, and the
sufficient-statistic accumulators needed to keep streaming after a reload.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import ConfigError
from .gating import GatingParams, GatingPrior
from .inference import FitState, posteriors_from_stats
from .leaf import NodeStats
from .tree import TreePosterior, map_tree

SCHEMA = "softbct-model"
SCHEMA_VERSION = 1


def state_to_dict(state: FitState) -> dict:
    shape = state.shape
    return {
        "schema": SCHEMA,
        "version": SCHEMA_VERSION,
        "config": state.config.to_dict(),
        "gating": {
            "weights": {str(s): state.gating.W[s].tolist() for s in shape.inner_nodes},
            "prior": state.gating_prior.to_dict(),
        },
        "leaf_prior": state.leaf_prior.to_dict(),
        "tree_prior": state.tree_prior.to_dict(),
        "nodes": [state.node_post.node_dict(s) for s in range(shape.n_nodes)],
        "tree": tree_posterior_dict(state.tree_post),
        "accumulators": state.stats.to_dict(),
        "fit": {
            "iterations": state.iteration,
            "converged": state.converged,
            "n_seen": state.n_seen,
            "diagnostics": state.diagnostics,
        },
    }


def dumps(state: FitState) -> str:
    return json.dumps(state_to_dict(state), indent=1, sort_keys=True) + "\n"


def save_model(state: FitState, path) -> None:
    Path(path).write_text(dumps(state))


def state_from_dict(d: dict) -> FitState:
    if d.get("schema") != SCHEMA:
        raise ConfigError("not a softbct model file")
    if d.get("version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported model schema version {d.get('version')!r}")
    config = RunConfig.from_dict(d["config"])
    shape = config.shape()
    gating_prior = GatingPrior.from_dict(d["gating"]["prior"])
    weights = d["gating"]["weights"]
    P = config.J + 1
    W = np.empty((shape.n_inner, config.M, P))
    for s in shape.inner_nodes:
        W[s] = np.asarray(weights[str(s)], dtype=float).reshape(config.M, P)
    leaf_prior = config.leaf_prior()
    tree_prior = config.tree_prior()
    stats = NodeStats.from_dict(d["accumulators"])
    if stats.sq.shape[0] != shape.n_nodes:
        raise ConfigError("accumulator node count does not match the tree shape")
    # posteriors are rebuilt from the accumulators; stored values are informational
    node_post, tree_post = posteriors_from_stats(stats, leaf_prior, tree_prior)
    fit_info = d.get("fit", {})
    return FitState(
        config=config,
        shape=shape,
        tree_prior=tree_prior,
        leaf_prior=leaf_prior,
        gating_prior=gating_prior,
        gating=GatingParams(W),
        stats=stats,
        node_post=node_post,
        tree_post=tree_post,
        iteration=int(fit_info.get("iterations", 0)),
        converged=bool(fit_info.get("converged", False)),
        n_seen=int(fit_info.get("n_seen", 0)),
        diagnostics=list(fit_info.get("diagnostics", [])),
    )


def load_model(path) -> FitState:
    return state_from_dict(json.loads(Path(path).read_text()))


def tree_posterior_dict(post: TreePosterior) -> dict:
    """Tree posterior plus MAP leaves, the standalone tree document."""
    return {**post.to_dict(), "map_leaves": list(map_tree(post).leaves)}
