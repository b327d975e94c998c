import math

import numpy as np
import pytest

from oracles import all_subtrees, brute_tree_posterior, node_depths, subtree_prior
from softbct.errors import CapExceededError, ConfigError, NumericalError
from softbct.tree import (
    Subtree,
    TreePosterior,
    TreePrior,
    TreeShape,
    enumerate_subtrees,
    map_tree,
    node_leaf_marginal,
    prior_prob,
    update_tree_posterior,
)


@pytest.mark.parametrize("M,D,count", [(2, 0, 1), (2, 1, 2), (2, 2, 5), (2, 3, 26), (3, 2, 9), (4, 1, 2)])
def test_subtree_counts(M, D, count):
    shape = TreeShape(M, D)
    assert shape.count_subtrees() == count
    assert len(all_subtrees(M, D)) == count
    found = {(t.inner, t.leaves) for t in enumerate_subtrees(shape)}
    assert found == set(all_subtrees(M, D))


def test_shape_layout():
    shape = TreeShape(3, 2)
    assert shape.n_nodes == 13 and shape.n_inner == 4
    assert list(shape.depth) == node_depths(3, 2)
    assert list(shape.children(2)) == [7, 8, 9]
    assert shape.parent(8) == 2 and shape.parent(0) is None
    assert shape.child_index(8) == 1
    assert shape.ancestors(8) == [0, 2]
    assert shape.path(8) == [(0, 1), (2, 1)]
    assert list(shape.leaf_nodes) == list(range(4, 13))


def test_shape_rejects_bad_constants():
    with pytest.raises(ConfigError):
        TreeShape(1, 2)
    with pytest.raises(ConfigError):
        TreeShape(2, -1)


def test_enumeration_cap():
    with pytest.raises(CapExceededError):
        enumerate_subtrees(TreeShape(2, 5), cap=1000)


def test_prior_normalizes():
    rng = np.random.default_rng(0)
    for M, D in [(2, 3), (3, 2), (2, 1)]:
        shape = TreeShape(M, D)
        prior = TreePrior(shape, rng.uniform(0.05, 0.95, shape.n_nodes))
        total = sum(prior_prob(prior, t) for t in enumerate_subtrees(shape))
        assert total == pytest.approx(1.0, abs=1e-12)


def test_prior_forces_deepest_to_leaf():
    shape = TreeShape(2, 2)
    prior = TreePrior.constant(shape, 0.7)
    assert np.all(prior.g[3:] == 0.0) and np.all(prior.g[:3] == 0.7)
    halving = TreePrior.halving(shape, 0.5)
    assert list(halving.g[:3]) == [0.5, 0.25, 0.25]


def test_posterior_matches_enumeration():
    rng = np.random.default_rng(1)
    for M, D in [(2, 2), (3, 2), (2, 3)]:
        shape = TreeShape(M, D)
        g = rng.uniform(0.1, 0.9, shape.n_nodes)
        prior = TreePrior(shape, g)
        log_gamma = rng.normal(-20, 5, shape.n_nodes)
        post = update_tree_posterior(prior, log_gamma)
        trees, probs = brute_tree_posterior(prior.g, log_gamma, M, D)
        for (inner, leaves), p in zip(trees, probs):
            assert post.prob(Subtree(inner, leaves)) == pytest.approx(p, rel=1e-10, abs=1e-300)
        for s in range(shape.n_nodes):
            expected = sum(p for (_, leaves), p in zip(trees, probs) if s in leaves)
            assert node_leaf_marginal(post, s) == pytest.approx(expected, rel=1e-10, abs=1e-14)
        np.testing.assert_allclose(
            post.leaf_marginals(), [node_leaf_marginal(post, s) for s in range(shape.n_nodes)], rtol=1e-13
        )
        best = trees[int(np.argmax(probs))]
        found = map_tree(post)
        assert (found.inner, found.leaves) == best


def test_root_phi_is_evidence():
    shape = TreeShape(2, 2)
    prior = TreePrior.constant(shape, 0.4)
    log_gamma = np.array([-3.0, -1.0, -2.0, -0.5, -0.7, -1.5, -0.2])
    post = update_tree_posterior(prior, log_gamma)
    direct = 0.0
    for inner, leaves in all_subtrees(2, 2):
        direct += subtree_prior(prior.g, inner, leaves) * math.exp(sum(log_gamma[s] for s in leaves))
    assert post.log_phi[0] == pytest.approx(math.log(direct), rel=1e-12)


def test_recursion_stable_for_large_magnitudes():
    shape = TreeShape(2, 3)
    prior = TreePrior.constant(shape, 0.5)
    log_gamma = np.linspace(-5e4, -1e4, shape.n_nodes)
    post = update_tree_posterior(prior, log_gamma)
    assert np.all(np.isfinite(post.log_phi))
    assert np.all((post.g_prime >= 0) & (post.g_prime <= 1))


def test_nonfinite_log_gamma_names_node():
    shape = TreeShape(2, 1)
    with pytest.raises(NumericalError, match="node 2"):
        update_tree_posterior(TreePrior.constant(shape, 0.5), [0.0, -1.0, np.nan])


def test_map_tie_prefers_leaf():
    shape = TreeShape(2, 1)
    post = TreePosterior(shape, np.array([0.5, 0.0, 0.0]), np.zeros(3), np.zeros(3))
    assert map_tree(post).leaves == (0,)


def test_map_with_zero_split_probability():
    shape = TreeShape(2, 2)
    post = update_tree_posterior(TreePrior.constant(shape, 0.0), np.zeros(shape.n_nodes))
    assert np.all(post.g_prime == 0)
    assert map_tree(post).leaves == (0,)


def test_posterior_round_trip():
    shape = TreeShape(3, 1)
    post = update_tree_posterior(TreePrior.constant(shape, 0.3), np.arange(4.0) - 10)
    back = TreePosterior.from_dict(shape, post.to_dict())
    np.testing.assert_array_equal(back.g_prime, post.g_prime)
    np.testing.assert_array_equal(back.log_phi, post.log_phi)
