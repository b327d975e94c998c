import logging

import numpy as np
import pytest
from scipy.special import logsumexp

from oracles import expected_gauss_loglik, normal_gamma_posterior, path_edges, softmax as ref_softmax
from softbct.config import RunConfig
from softbct.data import TimeSeriesDataset, simulate_setar
from softbct.errors import DataError
from softbct.gating import GatingParams
from softbct.inference import (
    fit,
    gating_objective,
    hard_responsibilities,
    initialize,
    newton_step_w,
    newton_update,
    posteriors_from_stats,
    responsibilities,
    select_thresholds,
    sequential_update,
    sweep,
)
from softbct.leaf import LeafPrior, NodeStats
from softbct.tree import TreePrior, TreeShape


def random_model(M, D, J, K, seed):
    rng = np.random.default_rng(seed)
    shape = TreeShape(M, D)
    n_fake = 40
    XA = np.column_stack([np.ones(n_fake), rng.normal(size=(n_fake, K))])
    y = rng.normal(size=n_fake)
    stats = NodeStats.from_weights(XA, y, rng.uniform(size=(shape.n_nodes, n_fake)))
    leaf_prior = LeafPrior.default(K, 1.0, 1.0)
    tree_prior = TreePrior(shape, rng.uniform(0.2, 0.8, shape.n_nodes))
    node_post, tree_post = posteriors_from_stats(stats, leaf_prior, tree_prior)
    gating = GatingParams(rng.normal(scale=1.5, size=(shape.n_inner, M, J + 1)))
    return rng, shape, gating, node_post, tree_post


def brute_force_q(shape, gating, node_post, tree_post, x, XA, XL):
    """Normalize exp(sum over path edges of ln gate + star(child)) over every deepest node."""
    M, D = shape.M, shape.D_max
    g = tree_post.g_prime
    deepest = list(shape.level(D))
    n = len(x)
    q = np.zeros((n, shape.n_nodes))
    for t in range(n):
        logw = []
        for leaf in deepest:
            total = 0.0
            for parent, m in path_edges(leaf, M):
                child = M * parent + m + 1
                marg = 1.0 - g[child]
                a = child
                while a != 0:
                    a = (a - 1) // M
                    marg *= g[a]
                star = marg * expected_gauss_loglik(
                    x[t], XA[t], node_post.mu_p[child], node_post.Lambda_p[child], node_post.a_p[child], node_post.b_p[child]
                )
                total += np.log(ref_softmax(gating.W[parent] @ XL[t])[m]) + star
            logw.append(total)
        w = np.exp(np.array(logw) - logsumexp(logw))
        for leaf, p in zip(deepest, w):
            s = leaf
            q[t, s] += p
            while s != 0:
                s = (s - 1) // M
                q[t, s] += p
    return q


@pytest.mark.parametrize("M,D,n", [(3, 2, 4), (2, 3, 10), (2, 1, 5)])
def test_responsibilities_match_path_enumeration(M, D, n):
    rng, shape, gating, node_post, tree_post = random_model(M, D, 2, 1, seed=M + D)
    x = rng.normal(size=n)
    XA = np.column_stack([np.ones(n), rng.normal(size=n)])
    XL = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    resp = responsibilities(shape, gating, node_post, tree_post, x, XA, XL)
    expected = brute_force_q(shape, gating, node_post, tree_post, x, XA, XL)
    np.testing.assert_allclose(resp.q, expected, rtol=1e-10, atol=1e-300)
    # pi' is the ratio of child to parent mass
    for s in shape.inner_nodes:
        kids = list(shape.children(s))
        np.testing.assert_allclose(resp.pi[:, s, :], expected[:, kids] / expected[:, [s]], rtol=1e-9)


def test_identical_children_follow_the_gates():
    shape = TreeShape(2, 1)
    rng = np.random.default_rng(0)
    leaf_prior = LeafPrior.default(1)
    node_post, tree_post = posteriors_from_stats(NodeStats.zeros(3, 1), leaf_prior, TreePrior.constant(shape, 0.5))
    gating = GatingParams(rng.normal(size=(1, 2, 2)))
    XL = np.column_stack([np.ones(6), rng.normal(size=6)])
    resp = responsibilities(shape, gating, node_post, tree_post, rng.normal(size=6), XL, XL)
    for t in range(6):
        np.testing.assert_allclose(resp.pi[t, 0], ref_softmax(gating.W[0] @ XL[t]), rtol=1e-13)


def test_zero_weights_identical_posteriors_are_uniform():
    shape = TreeShape(3, 2)
    node_post, tree_post = posteriors_from_stats(
        NodeStats.zeros(shape.n_nodes, 0), LeafPrior.default(0), TreePrior.constant(shape, 0.5)
    )
    gating = GatingParams(np.zeros((shape.n_inner, 3, 2)))
    XL = np.column_stack([np.ones(5), np.arange(5.0)])
    resp = responsibilities(shape, gating, node_post, tree_post, np.arange(5.0), np.ones((5, 1)), XL)
    np.testing.assert_allclose(resp.pi, 1 / 3, rtol=1e-13)
    np.testing.assert_allclose(resp.q, np.tile(3.0 ** -shape.depth.astype(float), (5, 1)), rtol=1e-13)


def test_normalization_fuzz():
    rng = np.random.default_rng(11)
    for trial in range(60):
        M = int(rng.integers(2, 4))
        D = int(rng.integers(0, 3))
        rng2, shape, gating, node_post, tree_post = random_model(M, D, 1, 0, seed=trial)
        n = 7
        x = 3 * rng.normal(size=n)
        XL = np.column_stack([np.ones(n), rng.normal(size=n)])
        resp = responsibilities(shape, gating, node_post, tree_post, x, np.ones((n, 1)), XL, hard=bool(trial % 5 == 0))
        if shape.n_inner:
            np.testing.assert_allclose(resp.pi.sum(axis=2), 1.0, atol=1e-12)
        np.testing.assert_allclose(resp.q[:, list(shape.level(D))].sum(axis=1), 1.0, atol=1e-12)


def test_hard_responsibilities_are_indicators():
    rng, shape, gating, _, _ = random_model(2, 2, 1, 0, seed=3)
    XL = np.column_stack([np.ones(20), rng.normal(size=20)])
    resp = hard_responsibilities(shape, gating, XL)
    assert set(np.unique(resp.q)) <= {0.0, 1.0}
    np.testing.assert_array_equal(resp.q[:, 3:].sum(axis=1), 1.0)


# ---------------------------------------------------------------------------
# gating objective


def random_gating_problem(rng, M=3, P=3, n=30):
    XL = np.column_stack([np.ones(n), rng.normal(size=(n, P - 1))])
    q = rng.uniform(size=n)
    pi = rng.dirichlet(np.ones(M), size=n)
    eta = rng.normal(size=(M, P))
    A = rng.normal(size=(P, P))
    L = A @ A.T + 0.5 * np.eye(P)
    w = rng.normal(size=(M, P))
    return w, XL, q, pi, eta, L


def test_gradient_and_hessian_by_finite_differences():
    rng = np.random.default_rng(21)
    for _ in range(10):
        w, XL, q, pi, eta, L = random_gating_problem(rng)
        E, grad, H = gating_objective(w, XL, q, pi, eta, L)
        h = 1e-6
        fd = np.zeros(w.size)
        fd_hess = np.zeros((w.size, w.size))
        for i in range(w.size):
            e = np.zeros(w.size)
            e[i] = h
            plus, minus = w + e.reshape(w.shape), w - e.reshape(w.shape)
            fd[i] = (gating_objective(plus, XL, q, pi, eta, L, False) - gating_objective(minus, XL, q, pi, eta, L, False)) / (2 * h)
            fd_hess[:, i] = (gating_objective(plus, XL, q, pi, eta, L)[1] - gating_objective(minus, XL, q, pi, eta, L)[1]).ravel() / (2 * h)
        assert np.linalg.norm(fd - grad.ravel()) / np.linalg.norm(grad) < 1e-5
        assert np.linalg.norm(fd_hess - H) / np.linalg.norm(H) < 1e-4


def test_objective_zero_data_minimized_at_prior_mean():
    rng = np.random.default_rng(2)
    _, XL, _, pi, eta, L = random_gating_problem(rng)
    res = newton_update(eta, XL, np.zeros(len(XL)), pi, eta, L)
    np.testing.assert_allclose(res.w, eta, atol=1e-14)
    assert res.E_new == res.E_old == 0.0


def test_newton_steps_never_increase_objective():
    rng = np.random.default_rng(8)
    accepted = 0
    while accepted < 100:
        w, XL, q, pi, eta, L = random_gating_problem(rng, M=int(rng.integers(2, 4)), n=50)
        w = w[: pi.shape[1]]
        eta = eta[: pi.shape[1]]
        for _ in range(10):
            res = newton_update(w, XL, q, pi, eta, L)
            assert res.E_new <= res.E_old
            if res.accepted:
                accepted += 1
            w = res.w


def test_newton_respects_mask():
    rng = np.random.default_rng(9)
    w, XL, q, pi, eta, L = random_gating_problem(rng, P=4)
    mask = np.array([True, False, True, False])
    res = newton_update(w, XL, q, pi, eta, L, mask=mask)
    np.testing.assert_array_equal(res.w[:, ~mask], w[:, ~mask])


def test_newton_reaches_stationary_point():
    rng = np.random.default_rng(10)
    w, XL, q, pi, eta, L = random_gating_problem(rng)
    for _ in range(30):
        w = newton_update(w, XL, q, pi, eta, L).w
    _, grad, _ = gating_objective(w, XL, q, pi, eta, L)
    assert np.abs(grad).max() < 1e-9


# ---------------------------------------------------------------------------
# fitting


def ar_dataset(n, seed, coef=(0.3, 0.6), sd=0.5):
    rng = np.random.default_rng(seed)
    x = np.zeros(n + 50)
    for t in range(1, len(x)):
        x[t] = coef[0] + coef[1] * x[t - 1] + sd * rng.normal()
    return TimeSeriesDataset(x[51:], x[50:51])


def test_single_node_fit_is_conjugate():
    data = ar_dataset(300, 0)
    cfg = RunConfig(D_max=0, J=1, K=1, a=0.1, b=0.1)
    state = fit(data, cfg)
    assert state.converged and state.iteration == 1
    X = data.XA(1)
    Lp, mup, ap, bp = normal_gamma_posterior(X, data.x, np.ones(data.n), np.zeros(2), np.eye(2), 0.1, 0.1)
    np.testing.assert_allclose(state.node_post.Lambda_p[0], Lp, rtol=1e-10)
    np.testing.assert_allclose(state.node_post.mu_p[0], mup, rtol=1e-10)
    assert state.node_post.b_p[0] == pytest.approx(bp, rel=1e-10)
    assert state.node_post.a_p[0] == pytest.approx(ap, rel=1e-14)


def test_hard_partition_gives_subset_fits():
    sim = simulate_setar(400, 1)
    cfg = RunConfig(M=2, D_max=1, J=1, K=1, thresholds=[0.0], mode="hard", max_iters=3)
    state = fit(sim.dataset, cfg)
    X = sim.dataset.XA(1)
    lag = X[:, 1]
    for child, mask in [(1, lag < 0), (2, lag >= 0)]:
        _, mup, ap, bp = normal_gamma_posterior(X[mask], sim.dataset.x[mask], np.ones(mask.sum()), np.zeros(2), np.eye(2), 1.0, 1.0)
        np.testing.assert_allclose(state.node_post.mu_p[child], mup, rtol=1e-10)
        assert state.node_post.b_p[child] == pytest.approx(bp, rel=1e-10)
    assert set(np.unique(state.resp.q)) <= {0.0, 1.0}


def test_hard_mode_freezes_gating():
    sim = simulate_setar(300, 2)
    cfg = RunConfig(M=2, D_max=2, J=1, K=1, thresholds=[0.0], mode="hard", max_iters=5)
    init = initialize(sim.dataset, cfg)
    W0 = init.gating.W.copy()
    state = fit(sim.dataset, cfg, init=init)
    np.testing.assert_array_equal(state.gating.W, W0)
    assert state.converged


def test_max_iters_zero_returns_initialization():
    sim = simulate_setar(200, 3)
    cfg = RunConfig(thresholds=[0.0], max_iters=0)
    state = fit(sim.dataset, cfg)
    init = initialize(sim.dataset, cfg)
    assert state.iteration == 0 and not state.converged
    np.testing.assert_array_equal(state.gating.W, init.gating.W)
    np.testing.assert_array_equal(state.node_post.mu_p, init.node_post.mu_p)


def test_newton_step_on_state_decreases_objective():
    sim = simulate_setar(300, 4)
    cfg = RunConfig(thresholds=[0.0], max_iters=0)
    state = fit(sim.dataset, cfg)
    sweep(state, sim.dataset)
    for s in state.shape.inner_nodes:
        res = newton_step_w(state, sim.dataset, s)
        assert res.E_new <= res.E_old


def test_sweep_requires_nothing_and_is_deterministic():
    sim = simulate_setar(300, 5)
    cfg = RunConfig(thresholds=[0.0], max_iters=4)
    a = fit(sim.dataset, cfg)
    b = fit(sim.dataset, cfg)
    assert a.diagnostics == b.diagnostics
    np.testing.assert_array_equal(a.gating.W, b.gating.W)


def test_quantile_thresholds_by_default():
    sim = simulate_setar(300, 6)
    state = initialize(sim.dataset, RunConfig(M=3, D_max=1))
    assert state.config.thresholds == pytest.approx(list(np.quantile(sim.dataset.x, [1 / 3, 2 / 3])))


def test_threshold_grid_prefers_truth():
    sim = simulate_setar(600, 7)
    cfg = RunConfig(D_max=1, threshold_grid=[-1.0, 0.0, 1.0])
    assert select_thresholds(sim.dataset, cfg, cfg.threshold_grid) == [0.0]
    state = fit(sim.dataset, cfg.replace(max_iters=1))
    assert state.config.thresholds == [0.0] and state.config.threshold_grid is None


def test_no_warning_noise_at_stationarity(caplog):
    sim = simulate_setar(500, 8)
    with caplog.at_level(logging.WARNING, logger="softbct"):
        fit(sim.dataset, RunConfig(thresholds=[0.0], max_iters=30))
    assert not [r for r in caplog.records if "halvings" in r.message]


# ---------------------------------------------------------------------------
# streaming


def test_streaming_with_frozen_responsibilities_matches_batch():
    sim = simulate_setar(150, 9)
    data = sim.dataset
    cfg = RunConfig(thresholds=[0.0], max_iters=3)
    state = fit(data, cfg)
    from softbct.inference import compute_responsibilities

    q = compute_responsibilities(state, data).q
    batch = NodeStats.from_weights(data.XA(1), data.x, q.T)
    state.stats = NodeStats.zeros(state.shape.n_nodes, 1)
    XA, XL = data.XA(1), data.XL(1)
    for t in range(data.n):
        sequential_update(state, data.x[t], XA[t], XL[t], inner_iters=1, forced_q=q[t])
    for f in ("sxx", "sxy", "syy", "sq"):
        np.testing.assert_allclose(getattr(state.stats, f), getattr(batch, f), rtol=1e-10, atol=1e-10)


def test_zero_weight_point_leaves_node_unchanged():
    sim = simulate_setar(100, 10)
    state = fit(sim.dataset, RunConfig(thresholds=[0.0], max_iters=2))
    before = state.node_post.mu_p.copy()
    forced = np.array([1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0])
    sequential_update(state, 0.5, [1.0, 0.2], [1.0, 0.2], forced_q=forced)
    np.testing.assert_array_equal(state.node_post.mu_p[2], before[2])
    assert not np.array_equal(state.node_post.mu_p[1], before[1])
    assert state.n_seen == 101


def test_inner_iters_must_be_positive():
    sim = simulate_setar(60, 11)
    state = fit(sim.dataset, RunConfig(thresholds=[0.0], max_iters=1))
    with pytest.raises(DataError):
        sequential_update(state, 0.0, [1.0, 0.0], [1.0, 0.0], inner_iters=0)
