"""Normal-Gamma autoregressive models attached to tree nodes.

Every node of the perfect tree keeps a posterior, not only the leaves of
some particular subtree, because the responsibility recursion and the
tree weighting read ``gamma_s`` and the expected log-likelihood at every
node. Posteriors are computed from responsibility-weighted sufficient
statistics, so batch fitting and streaming share one code path.

Arrays carry a leading node axis throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from .errors import ConfigError, DataError, NumericalError

LOG_2PI = float(np.log(2.0 * np.pi))
B_FLOOR = 1e-300


@dataclass
class LeafPrior:
    """``theta ~ N(mu, (tau*Lambda)^{-1})``, ``tau ~ Gamma(a, rate=b)``."""

    mu: np.ndarray
    Lambda: np.ndarray
    a: float
    b: float

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        self.Lambda = np.atleast_2d(np.asarray(self.Lambda, dtype=float))
        k = self.mu.shape[0]
        if self.Lambda.shape != (k, k):
            raise ConfigError(f"Lambda must be {k}x{k}, got {self.Lambda.shape}")
        if not np.allclose(self.Lambda, self.Lambda.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.Lambda).max())):
            raise ConfigError("Lambda must be symmetric")
        try:
            self.chol = np.linalg.cholesky(self.Lambda)
        except np.linalg.LinAlgError:
            raise ConfigError("Lambda must be positive definite") from None
        if not (self.a > 0 and self.b > 0):
            raise ConfigError(f"Gamma parameters must be positive, got a={self.a}, b={self.b}")
        self.a = float(self.a)
        self.b = float(self.b)
        self.log_det = 2.0 * float(np.log(np.diag(self.chol)).sum())
        self.quad_mu = float(self.mu @ self.Lambda @ self.mu)

    @classmethod
    def default(cls, K: int, a: float = 1.0, b: float = 1.0) -> "LeafPrior":
        return cls(np.zeros(K + 1), np.eye(K + 1), a, b)

    @property
    def K(self) -> int:
        return self.mu.shape[0] - 1

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "Lambda": self.Lambda.ravel().tolist(), "a": self.a, "b": self.b}


@dataclass
class NodeStats:
    """Weighted sufficient statistics per node.

    ``sxx = X^T Q X``, ``sxy = X^T Q x``, ``syy = x^T Q x`` and ``sq = Tr Q``.
    """

    sxx: np.ndarray
    sxy: np.ndarray
    syy: np.ndarray
    sq: np.ndarray

    @classmethod
    def zeros(cls, n_nodes: int, K: int) -> "NodeStats":
        k = K + 1
        return cls(np.zeros((n_nodes, k, k)), np.zeros((n_nodes, k)), np.zeros(n_nodes), np.zeros(n_nodes))

    @classmethod
    def from_weights(cls, XA, x, Q) -> "NodeStats":
        """Statistics from an ``(n_nodes, n)`` weight matrix ``Q``.

        ``diag(q)`` is never formed; weights scale the design rows instead.
        """
        XA = np.atleast_2d(np.asarray(XA, dtype=float))
        x = np.asarray(x, dtype=float)
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        if Q.shape[1] != x.shape[0] or XA.shape[0] != x.shape[0]:
            raise DataError("weights, design and targets disagree on the number of time steps")
        if np.any(Q < 0):
            raise DataError("responsibility weights must be non-negative")
        return cls(
            np.einsum("st,ti,tj->sij", Q, XA, XA),
            Q @ (XA * x[:, None]),
            Q @ (x * x),
            Q.sum(axis=1),
        )

    def __add__(self, other: "NodeStats") -> "NodeStats":
        return NodeStats(self.sxx + other.sxx, self.sxy + other.sxy, self.syy + other.syy, self.sq + other.sq)

    def copy(self) -> "NodeStats":
        return NodeStats(self.sxx.copy(), self.sxy.copy(), self.syy.copy(), self.sq.copy())

    def to_dict(self) -> dict:
        return {
            "sxx": self.sxx.reshape(len(self.sq), -1).tolist(),
            "sxy": self.sxy.tolist(),
            "syy": self.syy.tolist(),
            "sq": self.sq.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NodeStats":
        sxy = np.asarray(d["sxy"], dtype=float)
        k = sxy.shape[1]
        return cls(
            np.asarray(d["sxx"], dtype=float).reshape(-1, k, k),
            sxy,
            np.asarray(d["syy"], dtype=float),
            np.asarray(d["sq"], dtype=float),
        )


@dataclass
class LeafPosterior:
    """Normal-Gamma posteriors for a batch of nodes, with cached Cholesky factors."""

    Lambda_p: np.ndarray
    mu_p: np.ndarray
    a_p: np.ndarray
    b_p: np.ndarray
    chol: np.ndarray
    log_det: np.ndarray
    trace_q: np.ndarray

    def __len__(self):
        return self.a_p.shape[0]

    def node_dict(self, s: int) -> dict:
        return {
            "mu_prime": self.mu_p[s].tolist(),
            "lambda_prime": self.Lambda_p[s].ravel().tolist(),
            "a_prime": float(self.a_p[s]),
            "b_prime": float(self.b_p[s]),
            "trace_q": float(self.trace_q[s]),
        }

    def log_gamma(self, prior: LeafPrior) -> np.ndarray:
        return log_gamma_s(prior, self)

    def expected_loglik(self, leaf_marginal, x, XA) -> np.ndarray:
        """``(n_nodes, n)`` table of expected_loglik_term for every node and time."""
        return expected_loglik_term(self, leaf_marginal, x, XA)


def posterior_from_stats(prior: LeafPrior, stats: NodeStats) -> LeafPosterior:
    Lambda_p = prior.Lambda + stats.sxx
    try:
        chol = np.linalg.cholesky(Lambda_p)
    except np.linalg.LinAlgError:
        raise NumericalError("posterior precision is not positive definite") from None
    rhs = prior.Lambda @ prior.mu + stats.sxy
    # two triangular solves against the cached factor
    z = np.linalg.solve(chol, rhs[..., None])
    mu_p = np.linalg.solve(np.swapaxes(chol, -1, -2), z)[..., 0]
    a_p = prior.a + 0.5 * stats.sq
    quad_post = np.einsum("si,si->s", z[..., 0], z[..., 0])  # mu'^T Lambda' mu'
    b_p = prior.b + 0.5 * (prior.quad_mu + stats.syy - quad_post)
    bad = np.flatnonzero(~(b_p > B_FLOOR))
    if bad.size:
        raise NumericalError(f"posterior rate b' = {b_p[bad[0]]!r} is not positive at node {int(bad[0])}")
    log_det = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    return LeafPosterior(Lambda_p, mu_p, a_p, b_p, chol, log_det, stats.sq.copy())


def update_leaf_posterior(prior: LeafPrior, X_A, x, q) -> LeafPosterior:
    """Responsibility-weighted conjugate update for one node (batch of size 1)."""
    q = np.asarray(q, dtype=float)
    if q.ndim != 1:
        raise DataError("q must be a vector of per-time weights")
    if np.any(q < 0):
        raise DataError("responsibility weights must be non-negative")
    X_A = np.asarray(X_A, dtype=float).reshape(len(q), -1)
    if X_A.shape[1] != prior.K + 1:
        raise DataError(f"design has {X_A.shape[1]} columns, prior expects {prior.K + 1}")
    return posterior_from_stats(prior, NodeStats.from_weights(X_A, x, q[None, :]))


def log_gamma_s(prior: LeafPrior, post: LeafPosterior) -> np.ndarray:
    """Log evidence term of each node for the tree weighting recursion."""
    out = (
        0.5 * prior.log_det
        - 0.5 * post.log_det
        + prior.a * np.log(prior.b)
        - post.a_p * np.log(post.b_p)
        - gammaln(prior.a)
        + gammaln(post.a_p)
        - 0.5 * post.trace_q * LOG_2PI
    )
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        raise NumericalError(f"log gamma is not finite at node {int(bad[0])}")
    return out


def expected_loglik_term(post: LeafPosterior, leaf_marginal, x, XA) -> np.ndarray:
    """Leaf-weighted expected Gaussian log-likelihood of ``x`` under each node posterior.

    Returns ``0.5 * marg * {(-ln 2pi + psi(a') - ln b') - (a'/b') r^2 - x_A^T Lambda'^{-1} x_A}``
    with shape ``(n_nodes, n)``. The quadratic form uses the cached factor.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    XA = np.atleast_2d(np.asarray(XA, dtype=float))
    marg = np.broadcast_to(np.asarray(leaf_marginal, dtype=float), post.a_p.shape)
    if np.any((marg < 0) | (marg > 1 + 1e-12)):
        raise ConfigError("leaf marginals must lie in [0, 1]")
    z = np.linalg.solve(post.chol, np.broadcast_to(XA.T, (len(post),) + XA.T.shape))
    quad = np.einsum("skt,skt->st", z, z)
    resid = x[None, :] - post.mu_p @ XA.T
    const = -LOG_2PI + digamma(post.a_p) - np.log(post.b_p)
    body = const[:, None] - (post.a_p / post.b_p)[:, None] * resid**2 - quad
    return 0.5 * marg[:, None] * body
