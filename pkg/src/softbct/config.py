"""Run configuration: structural constants, hyperparameters and mode flags.

Configs load from TOML or JSON. Named presets ship as TOML files in
``softbct/presets``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .gating import GatingPrior, eta_schedule
from .leaf import LeafPrior
from .tree import TreePrior, TreeShape

MODES = ("soft", "hard")
TREE_SCHEDULES = ("constant", "halving")


def _matrix(value, k: int, name: str) -> np.ndarray:
    """Scalar means ``value * I``; otherwise a ``k x k`` matrix (nested or flat row-major)."""
    if value is None:
        return np.eye(k)
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(k)
    if arr.size != k * k:
        raise ConfigError(f"{name} must be a scalar or a {k}x{k} matrix")
    return arr.reshape(k, k)


@dataclass
class RunConfig:
    M: int = 2
    D_max: int = 2
    J: int = 1
    K: int = 1
    # tree prior: "constant" uses g everywhere; "halving" uses g * 2**(-depth)
    tree_schedule: str = "constant"
    g: float = 0.5
    # leaf prior
    mu: list | None = None
    Lambda: float | list | None = None
    a: float = 1.0
    b: float = 1.0
    # gating prior: explicit eta wins over thresholds/C
    eta: list | None = None
    thresholds: list | None = None
    C: float = 10.0
    active_lag: int = 1
    L: float | list | None = None
    mode: str = "soft"
    restricted: bool = False
    freeze_gating: bool = False
    tol: float = 1e-6
    max_iters: int = 100
    inner_iters: int = 3
    max_halvings: int = 20
    seed: int | None = None
    threshold_grid: list | None = field(default=None, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> "RunConfig":
        for name in ("M", "D_max", "J", "K", "max_iters", "inner_iters", "max_halvings", "active_lag"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v:
                raise ConfigError(f"{name} must be an integer, got {v!r}")
            setattr(self, name, int(v))
        if self.M < 2:
            raise ConfigError(f"M must be >= 2, got {self.M}")
        if self.D_max < 0 or self.J < 1 or self.K < 0:
            raise ConfigError("need D_max >= 0, J >= 1 and K >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.tree_schedule not in TREE_SCHEDULES:
            raise ConfigError(f"tree_schedule must be one of {TREE_SCHEDULES}")
        if not 0.0 <= self.g <= 1.0:
            raise ConfigError("g must lie in [0, 1]")
        if not (self.tol > 0 and self.max_iters >= 0 and self.inner_iters >= 1):
            raise ConfigError("need tol > 0, max_iters >= 0 and inner_iters >= 1")
        if self.restricted and self.J < self.D_max:
            raise ConfigError(f"restricted weights need J >= D_max (J={self.J}, D_max={self.D_max})")
        if self.thresholds is not None and self.threshold_grid is not None:
            raise ConfigError("give either thresholds or threshold_grid, not both")
        if self.thresholds is not None and len(self.thresholds) != self.M - 1:
            raise ConfigError(f"need M-1={self.M - 1} thresholds")
        if not self.C > 0:
            raise ConfigError("steepness C must be positive")
        return self

    @property
    def hard(self) -> bool:
        return self.mode == "hard"

    @property
    def gating_frozen(self) -> bool:
        return self.freeze_gating or self.hard

    @property
    def n_lags(self) -> int:
        return max(self.J, self.K)

    def shape(self) -> TreeShape:
        return TreeShape(self.M, self.D_max)

    def tree_prior(self) -> TreePrior:
        shape = self.shape()
        if self.tree_schedule == "halving":
            return TreePrior.halving(shape, self.g)
        return TreePrior.constant(shape, self.g)

    def leaf_prior(self) -> LeafPrior:
        k = self.K + 1
        mu = np.zeros(k) if self.mu is None else np.asarray(self.mu, dtype=float)
        return LeafPrior(mu, _matrix(self.Lambda, k, "Lambda"), self.a, self.b)

    def gating_prior(self) -> GatingPrior:
        L = _matrix(self.L, self.J + 1, "L")
        if self.eta is not None:
            eta = np.asarray(self.eta, dtype=float)
            if eta.shape != (self.M, self.J + 1):
                raise ConfigError(f"eta must be {self.M}x{self.J + 1}")
        else:
            if self.thresholds is None:
                raise ConfigError("the gating prior needs eta or thresholds")
            eta = eta_schedule(self.thresholds, self.C, self.M, self.J, self.active_lag)
        return GatingPrior(eta, L, self.active_lag)

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


def load_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        data = json.loads(text)
    else:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    data.pop("description", None)
    return RunConfig.from_dict(data)


def available_presets() -> list[str]:
    root = resources.files("softbct") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def load_preset(name: str) -> RunConfig:
    root = resources.files("softbct") / "presets"
    target = root / f"{name}.toml"
    if not target.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(available_presets())}")
    data = tomllib.loads(target.read_text())
    data.pop("description", None)
    return RunConfig.from_dict(data)
