"""Perfect M-ary context tree, the prior over regular subtrees and its posterior.

Nodes are numbered breadth-first: the root is 0 and the children of node
``s`` are ``M*s + 1, ..., M*s + M``. Child ``m`` (0-based here) is the
``m+1``-th child. All per-node quantities live in flat arrays indexed by
node id.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import CapExceededError, ConfigError, NumericalError

DEFAULT_SUBTREE_CAP = 10**5


class TreeShape:
    """Index arithmetic for the perfect tree of branching ``M`` and depth ``D_max``."""

    def __init__(self, M: int, D_max: int):
        if int(M) != M or M < 2:
            raise ConfigError(f"branching factor M must be an integer >= 2, got {M}")
        if int(D_max) != D_max or D_max < 0:
            raise ConfigError(f"D_max must be a non-negative integer, got {D_max}")
        self.M = int(M)
        self.D_max = int(D_max)
        self.n_nodes = (self.M ** (self.D_max + 1) - 1) // (self.M - 1)
        self.n_inner = (self.M**self.D_max - 1) // (self.M - 1)
        self.n_leaves = self.M**self.D_max

    def __repr__(self):
        return f"TreeShape(M={self.M}, D_max={self.D_max})"

    def __eq__(self, other):
        return isinstance(other, TreeShape) and (self.M, self.D_max) == (other.M, other.D_max)

    def __hash__(self):
        return hash((self.M, self.D_max))

    @cached_property
    def depth(self) -> np.ndarray:
        d = np.empty(self.n_nodes, dtype=int)
        start = 0
        for level in range(self.D_max + 1):
            width = self.M**level
            d[start : start + width] = level
            start += width
        return d

    def level(self, d: int) -> range:
        """Node ids at depth ``d`` (contiguous in breadth-first order)."""
        start = (self.M**d - 1) // (self.M - 1)
        return range(start, start + self.M**d)

    @property
    def inner_nodes(self) -> range:
        return range(self.n_inner)

    @property
    def leaf_nodes(self) -> range:
        return range(self.n_inner, self.n_nodes)

    def is_inner(self, s: int) -> bool:
        return 0 <= s < self.n_inner

    def is_deepest(self, s: int) -> bool:
        return self.n_inner <= s < self.n_nodes

    def check_node(self, s: int) -> int:
        if not 0 <= s < self.n_nodes:
            raise ConfigError(f"node id {s} out of range for {self!r}")
        return int(s)

    def parent(self, s: int) -> int | None:
        self.check_node(s)
        return None if s == 0 else (s - 1) // self.M

    def child_index(self, s: int) -> int:
        """0-based position of ``s`` among its parent's children."""
        if s == 0:
            raise ConfigError("the root has no parent")
        return (s - 1) % self.M

    def children(self, s: int) -> range:
        self.check_node(s)
        if not self.is_inner(s):
            return range(0)
        return range(self.M * s + 1, self.M * s + self.M + 1)

    def ancestors(self, s: int) -> list[int]:
        """Strict ancestors of ``s``, root first."""
        out = []
        p = self.parent(s)
        while p is not None:
            out.append(p)
            p = self.parent(p)
        return out[::-1]

    def path(self, leaf: int) -> list[tuple[int, int]]:
        """``(inner node, child index)`` edges from the root down to ``leaf``."""
        nodes = self.ancestors(leaf) + [leaf]
        return [(nodes[i], self.child_index(nodes[i + 1])) for i in range(len(nodes) - 1)]

    def count_subtrees(self) -> int:
        c = 1
        for _ in range(self.D_max):
            c = 1 + c**self.M
        return c


@dataclass(frozen=True)
class Subtree:
    """A regular subtree rooted at node 0, given by its inner and leaf node ids."""

    inner: tuple[int, ...]
    leaves: tuple[int, ...]

    @classmethod
    def from_inner(cls, shape: TreeShape, inner) -> "Subtree":
        inner_set = set(int(s) for s in inner)
        leaves = []
        stack = [0]
        while stack:
            s = stack.pop()
            if s in inner_set:
                if not shape.is_inner(s):
                    raise ConfigError(f"node {s} cannot be split at depth D_max")
                stack.extend(shape.children(s))
            else:
                leaves.append(s)
        return cls(tuple(sorted(inner_set)), tuple(sorted(leaves)))

    def max_depth(self, shape: TreeShape) -> int:
        return int(max(shape.depth[s] for s in self.leaves))


def enumerate_subtrees(shape: TreeShape, cap: int = DEFAULT_SUBTREE_CAP) -> list[Subtree]:
    """Every regular subtree of the perfect tree, rooted at node 0."""
    count = shape.count_subtrees()
    if count > cap:
        raise CapExceededError(f"{shape!r} has {count} regular subtrees, cap is {cap}")

    def inner_sets(s):
        # each result is a tuple of inner nodes of a subtree rooted at s
        out = [()]
        if shape.is_inner(s):
            combos = [(s,)]
            for ch in shape.children(s):
                combos = [c + sub for c in combos for sub in inner_sets(ch)]
            out.extend(combos)
        return out

    return [Subtree.from_inner(shape, inner) for inner in inner_sets(0)]


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


class TreePrior:
    """Per-node split probabilities ``g_s``; forced to 0 at depth ``D_max``."""

    def __init__(self, shape: TreeShape, g):
        g = np.array(np.broadcast_to(np.asarray(g, dtype=float), (shape.n_nodes,)))
        if not np.all((g >= 0.0) & (g <= 1.0)):
            raise ConfigError("split probabilities must lie in [0, 1]")
        g[shape.n_inner :] = 0.0
        g.setflags(write=False)
        self.shape = shape
        self.g = g

    @classmethod
    def constant(cls, shape: TreeShape, value: float) -> "TreePrior":
        return cls(shape, value)

    @classmethod
    def halving(cls, shape: TreeShape, scale: float = 1.0) -> "TreePrior":
        """``g_s = scale * 2**(-depth)``."""
        return cls(shape, scale * 2.0 ** (-shape.depth.astype(float)))

    def log_prob(self, subtree: Subtree) -> float:
        return _product_log_prob(self.g, subtree)

    def to_dict(self) -> dict:
        return {"g": self.g.tolist()}


def _product_log_prob(g, subtree: Subtree) -> float:
    lg = _log(np.asarray(g)[list(subtree.inner)]).sum() if subtree.inner else 0.0
    l1g = _log(1.0 - np.asarray(g)[list(subtree.leaves)]).sum()
    return float(lg + l1g)


def prior_prob(prior: TreePrior, subtree: Subtree) -> float:
    """``prod_{inner} g_s * prod_{leaves} (1 - g_s)``."""
    return float(np.exp(prior.log_prob(subtree)))


@dataclass
class TreePosterior:
    """Product-form posterior over subtrees, with its recursion values in log domain."""

    shape: TreeShape
    g_prime: np.ndarray
    log_phi: np.ndarray
    log_gamma: np.ndarray

    def log_prob(self, subtree: Subtree) -> float:
        return _product_log_prob(self.g_prime, subtree)

    def prob(self, subtree: Subtree) -> float:
        return float(np.exp(self.log_prob(subtree)))

    def leaf_marginals(self) -> np.ndarray:
        """Posterior probability that each node is a leaf of the tree."""
        reach = np.ones(self.shape.n_nodes)
        for s in self.shape.inner_nodes:
            reach[self.shape.children(s)] = reach[s] * self.g_prime[s]
        return (1.0 - self.g_prime) * reach

    def to_dict(self) -> dict:
        depth = self.shape.depth
        return {
            "nodes": [
                {
                    "depth": int(depth[s]),
                    "g_prime": float(self.g_prime[s]),
                    "log_phi": float(self.log_phi[s]),
                    "log_gamma": float(self.log_gamma[s]),
                }
                for s in range(self.shape.n_nodes)
            ]
        }

    @classmethod
    def from_dict(cls, shape: TreeShape, d: dict) -> "TreePosterior":
        nodes = d["nodes"]
        if len(nodes) != shape.n_nodes:
            raise ConfigError("tree posterior node count does not match the tree shape")
        return cls(
            shape,
            np.array([n["g_prime"] for n in nodes], dtype=float),
            np.array([n["log_phi"] for n in nodes], dtype=float),
            np.array([n["log_gamma"] for n in nodes], dtype=float),
        )


def update_tree_posterior(prior: TreePrior, log_gamma) -> TreePosterior:
    """Bottom-up weighting recursion giving ``phi_s`` and the posterior ``g'_s``.

    ``log phi_s = logaddexp(log(1-g_s) + log gamma_s, log g_s + sum_ch log phi_ch)``
    at inner nodes and ``log gamma_s`` at the deepest level.
    """
    shape = prior.shape
    log_gamma = np.asarray(log_gamma, dtype=float)
    if log_gamma.shape != (shape.n_nodes,):
        raise ConfigError(f"log_gamma must have shape ({shape.n_nodes},)")
    bad = np.flatnonzero(~np.isfinite(log_gamma))
    if bad.size:
        raise NumericalError(f"log gamma is not finite at node {int(bad[0])}")

    M = shape.M
    log_g = _log(prior.g)
    log_1g = _log(1.0 - prior.g)
    log_phi = log_gamma.copy()
    g_prime = np.zeros(shape.n_nodes)
    for d in range(shape.D_max - 1, -1, -1):
        nodes = np.asarray(shape.level(d))
        first_child = M * nodes[0] + 1
        child_sum = log_phi[first_child : first_child + M * len(nodes)].reshape(-1, M).sum(axis=1)
        split = log_g[nodes] + child_sum
        log_phi[nodes] = np.logaddexp(log_1g[nodes] + log_gamma[nodes], split)
        with np.errstate(invalid="ignore"):
            g_prime[nodes] = np.exp(split - log_phi[nodes])
        bad = nodes[~np.isfinite(log_phi[nodes]) | ~np.isfinite(g_prime[nodes])]
        if bad.size:
            raise NumericalError(f"tree recursion produced a non-finite value at node {int(bad[0])}")
    np.clip(g_prime, 0.0, 1.0, out=g_prime)
    return TreePosterior(shape, g_prime, log_phi, log_gamma)


def node_leaf_marginal(post: TreePosterior, s: int) -> float:
    """``(1 - g'_s) * prod over strict ancestors of g'``."""
    shape = post.shape
    shape.check_node(s)
    p = 1.0 - post.g_prime[s]
    for a in shape.ancestors(s):
        p *= post.g_prime[a]
    return float(p)


def map_tree(post: TreePosterior) -> Subtree:
    """Most probable subtree under the product-form posterior; ties go to the smaller tree."""
    shape = post.shape
    g = post.g_prime
    best = _log(1.0 - g)  # deepest nodes: log 1 = 0
    split = np.zeros(shape.n_nodes, dtype=bool)
    for d in range(shape.D_max - 1, -1, -1):
        for s in shape.level(d):
            leaf_score = _log(1.0 - g[s])
            split_score = _log(g[s]) + sum(best[ch] for ch in shape.children(s))
            if split_score > leaf_score:
                split[s] = True
                best[s] = split_score
            else:
                best[s] = leaf_score
    inner = []
    stack = [0]
    while stack:
        s = stack.pop()
        if split[s]:
            inner.append(s)
            stack.extend(shape.children(s))
    return Subtree.from_inner(shape, inner)
