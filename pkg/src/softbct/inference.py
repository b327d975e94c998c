"""Variational learning of the soft context tree.

One sweep updates, in order, the routing responsibilities ``q(U)``, the
node and tree posteriors ``q(T, theta, tau)``, and the gating weights ``W``
(one damped Newton step per inner node). Sweeps repeat until the largest
relative change of ``g'``, ``mu'`` and ``W`` falls below ``tol``.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import log_softmax, logsumexp

from .config import RunConfig
from .data import TimeSeriesDataset
from .errors import ConfigError, DataError, NumericalError
from .gating import GatingParams, GatingPrior, hard_gate, restricted_mask
from .leaf import LeafPosterior, LeafPrior, NodeStats, posterior_from_stats
from .tree import TreePosterior, TreePrior, TreeShape, update_tree_posterior

log = logging.getLogger(__name__)

GRADIENT_FALLBACK_STEP = 1e-3


@dataclass
class Responsibilities:
    """Edge probabilities ``pi[t, s, m]`` (inner ``s``) and path weights ``q[t, s]`` (all nodes)."""

    pi: np.ndarray
    q: np.ndarray

    @property
    def n(self) -> int:
        return self.q.shape[0]


@dataclass
class FitState:
    config: RunConfig
    shape: TreeShape
    tree_prior: TreePrior
    leaf_prior: LeafPrior
    gating_prior: GatingPrior
    gating: GatingParams
    stats: NodeStats
    node_post: LeafPosterior
    tree_post: TreePosterior
    resp: Responsibilities | None = None
    iteration: int = 0
    converged: bool = False
    n_seen: int = 0
    diagnostics: list = field(default_factory=list)

    @property
    def hard(self) -> bool:
        return self.config.hard

    def node_means(self, s: int) -> np.ndarray:
        """Prior mean of the gating rows at inner node ``s``."""
        return self.gating_prior.node_mean(int(self.shape.depth[s]), self.config.restricted)


def _check_finite(arr: np.ndarray, what: str, nodes=None):
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        s, t = bad[0][:2]
        node = int(nodes[s]) if nodes is not None else int(s)
        raise NumericalError(f"{what} is not finite at t={int(t)}, node {node}")


def responsibilities(
    shape: TreeShape,
    gating: GatingParams,
    node_post: LeafPosterior,
    tree_post: TreePosterior,
    x,
    XA,
    XL,
    hard: bool = False,
) -> Responsibilities:
    """Routing posterior for every time step.

    Bottom-up, ``ln rho[c] = ln sigma_m(W_parent x_L) + star[c] + logsumexp_children(ln rho)``;
    normalizing ``rho`` over siblings gives ``pi``, and products of ``pi`` down
    each path give ``q``. The root's own star term is common to all paths and
    is skipped. In hard mode the gates are one-hot and the star terms cannot
    move them.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    XL = np.atleast_2d(XL)
    n = x.shape[0]
    M, N = shape.M, shape.n_nodes
    pi = np.empty((shape.n_inner, n, M))  # node-major while computing

    if shape.D_max > 0:
        if hard:
            pi[:] = hard_gate(gating.logits(XL))
        else:
            log_gate = gating.log_gates(XL)
            star = node_post.expected_loglik(tree_post.leaf_marginals(), x, XA)
            _check_finite(star, "expected log-likelihood")
            sub = star  # becomes star[c] + logsumexp over children of ln rho
            for d in range(shape.D_max, 0, -1):
                lvl = shape.level(d)
                parents = np.asarray(shape.level(d - 1))
                # ln rho for edges into level d, grouped by parent: (n_parents, M, n)
                log_rho = log_gate[parents].transpose(0, 2, 1) + sub[lvl.start : lvl.stop].reshape(-1, M, n)
                _check_finite(log_rho.reshape(-1, n), "ln rho", np.asarray(lvl))
                pi[parents] = np.exp(log_softmax(log_rho, axis=1)).transpose(0, 2, 1)
                sub[parents] = sub[parents] + logsumexp(log_rho, axis=1)

    q = np.empty((N, n))
    q[0] = 1.0
    for d in range(1, shape.D_max + 1):
        lvl = shape.level(d)
        parents = np.asarray(shape.level(d - 1))
        q[lvl.start : lvl.stop] = (q[parents][:, None, :] * pi[parents].transpose(0, 2, 1)).reshape(-1, n)
    return Responsibilities(pi.transpose(1, 0, 2).copy(), q.T.copy())


def compute_responsibilities(state: FitState, dataset: TimeSeriesDataset) -> Responsibilities:
    cfg = state.config
    return responsibilities(
        state.shape,
        state.gating,
        state.node_post,
        state.tree_post,
        dataset.x,
        dataset.XA(cfg.K),
        dataset.XL(cfg.J),
        hard=cfg.hard,
    )


def hard_responsibilities(shape: TreeShape, gating: GatingParams, XL) -> Responsibilities:
    """0/1 routing by the largest logit at every inner node."""
    XL = np.atleast_2d(XL)
    return responsibilities(shape, gating, None, None, np.zeros(XL.shape[0]), None, XL, hard=True)


def posteriors_from_stats(
    stats: NodeStats, leaf_prior: LeafPrior, tree_prior: TreePrior
) -> tuple[LeafPosterior, TreePosterior]:
    node_post = posterior_from_stats(leaf_prior, stats)
    tree_post = update_tree_posterior(tree_prior, node_post.log_gamma(leaf_prior))
    return node_post, tree_post


def update_model_posteriors(state: FitState, dataset: TimeSeriesDataset) -> FitState:
    """Refresh every node posterior from the current responsibilities, then the tree posterior."""
    cfg = state.config
    if state.resp is None:
        raise DataError("responsibilities have not been computed")
    state.stats = NodeStats.from_weights(dataset.XA(cfg.K), dataset.x, state.resp.q.T)
    state.node_post, state.tree_post = posteriors_from_stats(state.stats, state.leaf_prior, state.tree_prior)
    return state


# ---------------------------------------------------------------------------
# gating weights


def gating_objective(w_s, XL, q_s, pi_s, eta_s, L, with_derivatives: bool = True):
    """``E(w_s)`` of one inner node, with gradient and Hessian.

    ``E = -sum_t q_t sum_m pi_tm ln sigma_m(W_s x_t) + 0.5 sum_m (w_m - eta_m)^T L (w_m - eta_m)``.
    The gradient has shape ``(M, J+1)``; the Hessian is ``(M(J+1), M(J+1))``
    with row-major ``(m, j)`` ordering of ``w_s``.
    """
    w_s = np.asarray(w_s, dtype=float)
    M, P = w_s.shape
    XL = np.atleast_2d(XL)
    z = XL @ w_s.T
    logsig = log_softmax(z, axis=1)
    diff = w_s - eta_s
    E = -float(np.sum(q_s[:, None] * pi_s * logsig)) + 0.5 * float(np.einsum("mi,ij,mj->", diff, L, diff))
    if not with_derivatives:
        return E
    sig = np.exp(logsig)
    grad = -((q_s[:, None] * (pi_s - sig)).T @ XL) + diff @ L
    # A[t, m, m'] = sigma_m' (delta_mm' - sigma_m)
    A = np.einsum("tb,ab->tab", sig, np.eye(M)) - sig[:, :, None] * sig[:, None, :]
    H = np.einsum("t,tab,ti,tj->aibj", q_s, A, XL, XL).reshape(M * P, M * P)
    H += np.kron(np.eye(M), L)
    return E, grad, H


@dataclass
class NewtonResult:
    w: np.ndarray
    E_old: float
    E_new: float
    accepted: bool
    halvings: int
    fallback: bool


def newton_step_w(state: FitState, dataset: TimeSeriesDataset, s: int, max_halvings: int | None = None) -> NewtonResult:
    """One damped Newton step on the weights of inner node ``s``; writes them back when accepted."""
    cfg = state.config
    if state.resp is None:
        raise DataError("responsibilities have not been computed")
    XL = dataset.XL(cfg.J)
    q_s = state.resp.q[:, s]
    pi_s = state.resp.pi[:, s, :]
    result = newton_update(
        state.gating.W[s],
        XL,
        q_s,
        pi_s,
        state.node_means(s),
        state.gating_prior.L,
        mask=restricted_mask(cfg.J, int(state.shape.depth[s])) if cfg.restricted else None,
        max_halvings=cfg.max_halvings if max_halvings is None else max_halvings,
    )
    if result.accepted:
        state.gating.W[s] = result.w
    return result


def newton_update(w_s, XL, q_s, pi_s, eta_s, L, mask=None, max_halvings: int = 20) -> NewtonResult:
    """Newton direction with backtracking halving until ``E`` does not increase.

    ``mask`` marks the free coordinates of each gating row; the others stay
    pinned. A failed Hessian factorization falls back to a small gradient step.
    """
    w_s = np.asarray(w_s, dtype=float)
    M, P = w_s.shape
    E0, grad, H = gating_objective(w_s, XL, q_s, pi_s, eta_s, L)
    free = np.ones(M * P, dtype=bool) if mask is None else np.tile(np.asarray(mask, dtype=bool), M)
    g = grad.ravel()[free]
    fallback = False
    try:
        direction = -cho_solve(cho_factor(H[np.ix_(free, free)]), g)
    except (LinAlgError, ValueError):
        log.warning("gating Hessian factorization failed; taking a gradient step")
        direction = -GRADIENT_FALLBACK_STEP * g
        fallback = True
    step = 1.0
    for halvings in range(max_halvings + 1):
        trial = w_s.ravel().copy()
        trial[free] += step * direction
        trial = trial.reshape(M, P)
        E1 = gating_objective(trial, XL, q_s, pi_s, eta_s, L, with_derivatives=False)
        if E1 <= E0:
            return NewtonResult(trial, E0, E1, True, halvings, fallback)
        step *= 0.5
    # at a stationary point rounding alone can block any decrease; only report real stalls
    predicted = -float(g @ direction) if not fallback else float(g @ g)
    level = logging.DEBUG if predicted <= 1e-10 * max(1.0, abs(E0)) else logging.WARNING
    log.log(level, "no decrease of the gating objective after %d halvings", max_halvings)
    return NewtonResult(w_s.copy(), E0, E0, False, max_halvings, fallback)


# ---------------------------------------------------------------------------
# fitting


def _quantile_thresholds(x, M: int) -> list[float]:
    return [float(v) for v in np.quantile(x, np.arange(1, M) / M)]


def initialize(dataset: TimeSeriesDataset, config: RunConfig) -> FitState:
    """Hard-threshold start: route by the prior-mean gates, fit posteriors, set ``W = eta``."""
    if dataset.n < 1:
        raise DataError("need at least one observation")
    if config.eta is None and config.thresholds is None:
        config = config.replace(thresholds=_quantile_thresholds(dataset.x, config.M))
    shape = config.shape()
    gating_prior = config.gating_prior()
    gating = GatingParams.at_prior_mean(shape, gating_prior, config.restricted)
    leaf_prior = config.leaf_prior()
    tree_prior = config.tree_prior()
    resp = hard_responsibilities(shape, gating, dataset.XL(config.J))
    stats = NodeStats.from_weights(dataset.XA(config.K), dataset.x, resp.q.T)
    node_post, tree_post = posteriors_from_stats(stats, leaf_prior, tree_prior)
    return FitState(
        config=config,
        shape=shape,
        tree_prior=tree_prior,
        leaf_prior=leaf_prior,
        gating_prior=gating_prior,
        gating=gating,
        stats=stats,
        node_post=node_post,
        tree_post=tree_post,
        resp=resp,
        n_seen=dataset.n,
    )


def select_thresholds(train: TimeSeriesDataset, config: RunConfig, grid) -> list[float]:
    """Grid search over candidate thresholds using the hard-split model evidence.

    Each increasing ``(M-1)``-tuple drawn from ``grid`` is scored by ``log phi``
    at the root of the hard-routed tree posterior on ``train``.
    """
    grid = sorted(set(float(v) for v in grid))
    if len(grid) < config.M - 1:
        raise ConfigError(f"threshold grid needs at least {config.M - 1} values")
    best, best_score = None, -math.inf
    for combo in itertools.combinations(grid, config.M - 1):
        cfg = config.replace(threshold_grid=None, thresholds=list(combo), eta=None)
        score = float(initialize(train, cfg).tree_post.log_phi[0])
        if score > best_score:
            best, best_score = list(combo), score
    return best


def _rel_change(new, old) -> float:
    new = np.asarray(new, dtype=float).ravel()
    old = np.asarray(old, dtype=float).ravel()
    if new.size == 0:
        return 0.0
    return float(np.max(np.abs(new - old) / np.maximum(np.abs(old), 1.0)))


def sweep(state: FitState, dataset: TimeSeriesDataset) -> dict:
    """One full update of q(U), q(T, theta, tau) and W; returns per-block changes."""
    g_old = state.tree_post.g_prime.copy()
    mu_old = state.node_post.mu_p.copy()
    W_old = state.gating.W.copy()

    state.resp = compute_responsibilities(state, dataset)
    update_model_posteriors(state, dataset)
    rejected = fallbacks = 0
    if not state.config.gating_frozen:
        for s in state.shape.inner_nodes:
            res = newton_step_w(state, dataset, s)
            if not res.accepted:
                rejected += 1
            if res.fallback:
                fallbacks += 1
            if res.E_new > res.E_old:
                raise NumericalError(f"gating objective increased at node {s}")

    state.iteration += 1
    return {
        "iteration": state.iteration,
        "g_prime": _rel_change(state.tree_post.g_prime, g_old),
        "mu_prime": _rel_change(state.node_post.mu_p, mu_old),
        "W": _rel_change(state.gating.W, W_old),
        "newton_rejected": rejected,
        "newton_fallbacks": fallbacks,
    }


def fit(dataset: TimeSeriesDataset, config: RunConfig, init: FitState | None = None) -> FitState:
    """Iterate sweeps from ``init`` (default: :func:`initialize`) until converged or ``max_iters``."""
    if init is None:
        if config.threshold_grid is not None:
            chosen = select_thresholds(dataset, config, config.threshold_grid)
            config = config.replace(threshold_grid=None, thresholds=chosen)
        init = initialize(dataset, config)
    state = init
    state.converged = False
    for _ in range(state.config.max_iters):
        diag = sweep(state, dataset)
        state.diagnostics.append(diag)
        change = max(diag["g_prime"], diag["mu_prime"], diag["W"])
        log.debug("sweep %d: max relative change %.3e", diag["iteration"], change)
        if change < state.config.tol:
            state.converged = True
            break
    state.n_seen = dataset.n
    return state


# ---------------------------------------------------------------------------
# streaming


def sequential_update(
    state: FitState,
    x_new: float,
    x_A,
    x_L,
    inner_iters: int | None = None,
    forced_q=None,
) -> FitState:
    """Absorb one observation with ``W`` fixed and past responsibilities frozen.

    Each inner iteration recomputes the new point's routing from the current
    posteriors, then rebuilds the posteriors from the stored statistics plus
    the new point's weighted contribution. ``forced_q`` (one weight per node)
    skips the routing computation.
    """
    iters = state.config.inner_iters if inner_iters is None else int(inner_iters)
    if iters < 1:
        raise DataError("inner_iters must be at least 1")
    x1 = np.array([float(x_new)])
    XA1 = np.asarray(x_A, dtype=float).reshape(1, -1)
    XL1 = np.asarray(x_L, dtype=float).reshape(1, -1)
    base = state.stats
    node_post, tree_post = state.node_post, state.tree_post
    for _ in range(iters):
        if forced_q is not None:
            q = np.asarray(forced_q, dtype=float).reshape(-1, 1)
        else:
            q = responsibilities(
                state.shape, state.gating, node_post, tree_post, x1, XA1, XL1, hard=state.config.hard
            ).q.T
        added = base + NodeStats.from_weights(XA1, x1, q)
        node_post, tree_post = posteriors_from_stats(added, state.leaf_prior, state.tree_prior)
    state.stats = added
    state.node_post, state.tree_post = node_post, tree_post
    state.resp = None
    state.n_seen += 1
    return state
