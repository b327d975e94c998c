"""Softmax gating at the inner nodes of the context tree.

Each inner node ``s`` holds an ``M x (J+1)`` weight matrix ``W_s``; the
probability of moving to child ``m`` at time ``t`` is
``softmax(W_s @ x_L)[m]`` with ``x_L = [1, x_{t-1}, ..., x_{t-J}]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

from .errors import ConfigError, NumericalError
from .tree import TreeShape


def softmax(v, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise NumericalError("softmax input must be finite")
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def hard_gate(logits, axis: int = -1) -> np.ndarray:
    """One-hot indicator of the largest logit (the infinitely steep softmax).

    Ties go to the lowest index, which is what ``argmax`` returns.
    """
    logits = np.asarray(logits, dtype=float)
    idx = np.argmax(logits, axis=axis)
    out = np.zeros_like(logits)
    np.put_along_axis(out, np.expand_dims(idx, axis), 1.0, axis=axis)
    return out


def gate_probs(W_s, x_L, hard: bool = False) -> np.ndarray:
    W_s = np.asarray(W_s, dtype=float)
    x_L = np.asarray(x_L, dtype=float)
    if W_s.ndim != 2 or x_L.shape[-1] != W_s.shape[1]:
        raise ConfigError(f"gating weights {W_s.shape} do not match regressor of length {x_L.shape[-1]}")
    logits = x_L @ W_s.T
    return hard_gate(logits) if hard else softmax(logits)


def eta_schedule(thresholds, C: float, M: int, J: int, active_lag: int = 1) -> np.ndarray:
    """Prior means of the gating rows placing class boundaries at ``thresholds``.

    The last row is zero. Working upward, row ``m`` gets slope ``-C*(M-m)`` on
    ``active_lag`` and intercept ``eta[m+1, 0] + h_m * (slope[m+1] - slope[m])``,
    so that logits ``m`` and ``m+1`` cross exactly at ``h_m``. With increasing
    thresholds, class 1 covers the lowest lag values.

    Returns an ``(M, J+1)`` array.
    """
    if not C > 0:
        raise ConfigError(f"steepness C must be positive, got {C}")
    if M < 2:
        raise ConfigError("M must be at least 2")
    if not 1 <= active_lag <= J:
        raise ConfigError(f"active_lag must lie in 1..J={J}, got {active_lag}")
    h = np.atleast_1d(np.asarray(thresholds, dtype=float))
    if h.shape != (M - 1,):
        raise ConfigError(f"need M-1={M - 1} thresholds, got {h.size}")
    eta = np.zeros((M, J + 1))
    for m in range(M - 2, -1, -1):  # 0-based; the 1-based class index is m+1
        eta[m, active_lag] = -C * (M - 1 - m)
        eta[m, 0] = eta[m + 1, 0] + h[m] * (eta[m + 1, active_lag] - eta[m, active_lag])
    return eta


def restricted_mask(J: int, depth: int) -> np.ndarray:
    """Free coordinates of a gating row at ``depth``: intercept and lag ``depth+1``."""
    if depth + 1 > J:
        raise ConfigError(f"restricted weights at depth {depth} need J >= {depth + 1}, got J={J}")
    mask = np.zeros(J + 1, dtype=bool)
    mask[0] = True
    mask[depth + 1] = True
    return mask


@dataclass
class GatingPrior:
    """Gaussian prior ``N(w_{s,m} | eta_m, L^{-1})`` shared by all inner nodes.

    ``active_lag`` tells restricted-weight mode which column of ``eta`` holds
    the slope; that slope is moved to lag ``depth+1`` at each node.
    """

    eta: np.ndarray
    L: np.ndarray
    active_lag: int = 1

    def __post_init__(self):
        self.eta = np.atleast_2d(np.asarray(self.eta, dtype=float))
        self.L = np.atleast_2d(np.asarray(self.L, dtype=float))
        p = self.eta.shape[1]
        if self.L.shape != (p, p):
            raise ConfigError(f"L must be {p}x{p}, got {self.L.shape}")
        if not np.allclose(self.L, self.L.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.L).max())):
            raise ConfigError("L must be symmetric")
        try:
            np.linalg.cholesky(self.L)
        except np.linalg.LinAlgError:
            raise ConfigError("L must be positive definite") from None
        if not np.all(np.isfinite(self.eta)):
            raise ConfigError("eta must be finite")

    @property
    def M(self) -> int:
        return self.eta.shape[0]

    @property
    def J(self) -> int:
        return self.eta.shape[1] - 1

    def node_mean(self, depth: int, restricted: bool = False) -> np.ndarray:
        if not restricted:
            return self.eta.copy()
        restricted_mask(self.J, depth)
        out = np.zeros_like(self.eta)
        out[:, 0] = self.eta[:, 0]
        out[:, depth + 1] = self.eta[:, self.active_lag]
        return out

    def to_dict(self) -> dict:
        return {"eta": self.eta.tolist(), "L": self.L.ravel().tolist(), "active_lag": self.active_lag}

    @classmethod
    def from_dict(cls, d: dict) -> "GatingPrior":
        eta = np.asarray(d["eta"], dtype=float)
        p = eta.shape[1]
        return cls(eta, np.asarray(d["L"], dtype=float).reshape(p, p), int(d.get("active_lag", 1)))


@dataclass
class GatingParams:
    """Weights of every inner node stacked as an ``(n_inner, M, J+1)`` array."""

    W: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        if self.W.ndim != 3:
            raise ConfigError("gating weights must be a 3-d array (n_inner, M, J+1)")
        if not np.all(np.isfinite(self.W)):
            raise NumericalError("gating weights must be finite")

    @property
    def J(self) -> int:
        return self.W.shape[2] - 1

    @classmethod
    def at_prior_mean(cls, shape: TreeShape, prior: GatingPrior, restricted: bool = False) -> "GatingParams":
        W = np.empty((shape.n_inner, shape.M, prior.J + 1))
        for s in shape.inner_nodes:
            W[s] = prior.node_mean(int(shape.depth[s]), restricted)
        return cls(W)

    def logits(self, XL) -> np.ndarray:
        """Logits for all inner nodes and rows of ``XL``: shape ``(n_inner, n, M)``."""
        return np.einsum("smj,tj->stm", self.W, np.atleast_2d(XL))

    def log_gates(self, XL, hard: bool = False) -> np.ndarray:
        z = self.logits(XL)
        if hard:
            with np.errstate(divide="ignore"):
                return np.log(hard_gate(z))
        return log_softmax(z, axis=-1)

    def copy(self) -> "GatingParams":
        return GatingParams(self.W.copy())

    def to_list(self) -> list:
        return self.W.tolist()


def path_log_prob(params: GatingParams, x_L, leaf: int, shape: TreeShape, hard: bool = False) -> float:
    """Log probability that the soft context path ends at ``leaf`` (a deepest node)."""
    shape.check_node(leaf)
    if not shape.is_deepest(leaf):
        raise ConfigError(f"node {leaf} is not at depth D_max")
    x_L = np.asarray(x_L, dtype=float)
    total = 0.0
    for s, m in shape.path(leaf):
        z = x_L @ params.W[s].T
        if hard:
            with np.errstate(divide="ignore"):
                total += float(np.log(hard_gate(z)[m]))
        else:
            total += float(log_softmax(z)[m])
    return total


def log_prior(params: GatingParams, prior: GatingPrior, shape: TreeShape, restricted: bool = False) -> float:
    """Gaussian log density of all weights, up to the normalizing constant."""
    total = 0.0
    for s in shape.inner_nodes:
        diff = params.W[s] - prior.node_mean(int(shape.depth[s]), restricted)
        total -= 0.5 * np.einsum("mi,ij,mj->", diff, prior.L, diff)
    return float(total)
