"""Time series containers, CSV input/output and synthetic generators."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass
class TimeSeriesDataset:
    """Observed series ``x_1..x_n`` plus the pre-sample context ``x_{1-p}..x_0``.

    Design rows carry a leading 1: ``XA(K)[t] = [1, x_{t-1}, ..., x_{t-K}]``
    and likewise for ``XL(J)``.
    """

    x: np.ndarray
    context: np.ndarray
    padded: bool = False

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).ravel()
        self.context = np.asarray(self.context, dtype=float).ravel()
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.context))):
            raise DataError("series and context must be finite")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([self.context, self.x])

    def design(self, lags: int) -> np.ndarray:
        if lags > self.context.shape[0]:
            raise DataError(f"need {lags} context values, have {self.context.shape[0]}")
        v = self.values
        p = self.context.shape[0]
        out = np.ones((self.n, lags + 1))
        for k in range(1, lags + 1):
            out[:, k] = v[p - k : p - k + self.n]
        return out

    def XA(self, K: int) -> np.ndarray:
        return self.design(K)

    def XL(self, J: int) -> np.ndarray:
        return self.design(J)

    def split(self, n_train: int) -> tuple["TimeSeriesDataset", "TimeSeriesDataset"]:
        """Training prefix and the remainder; the remainder's context is the prefix tail."""
        if not 0 <= n_train <= self.n:
            raise DataError(f"cannot split {self.n} points at {n_train}")
        p = self.context.shape[0]
        v = self.values
        head = TimeSeriesDataset(self.x[:n_train], self.context, self.padded)
        tail = TimeSeriesDataset(self.x[n_train:], v[n_train : n_train + p], self.padded)
        return head, tail


def _parse_rows(path: Path) -> list[float]:
    values = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not row[0].strip():
                continue
            cell = row[0].strip()
            try:
                values.append(float(cell))
            except ValueError:
                if lineno == 1 and not values:
                    continue  # header
                raise DataError(f"{path}:{lineno}: cannot parse {cell!r} as a number") from None
    return values


def load_csv(path, lags: int, context=None, context_rows: int = 0) -> TimeSeriesDataset:
    """Read a one-column CSV (header optional) into a dataset.

    The initial context is taken from ``context``, or from the first
    ``context_rows`` rows of the file. Otherwise it is padded with the series
    mean and a warning is emitted.
    """
    path = Path(path)
    values = _parse_rows(path)
    if not values:
        raise DataError(f"{path}: no numeric values")
    values = np.asarray(values)
    if context is not None:
        context = np.asarray(context, dtype=float).ravel()
        if context.shape[0] < lags:
            raise DataError(f"context has {context.shape[0]} values, need {lags}")
        return TimeSeriesDataset(values, context)
    if context_rows:
        if context_rows < lags:
            raise DataError(f"context_rows={context_rows} is fewer than the {lags} lags needed")
        if values.shape[0] <= context_rows:
            raise DataError(f"{path}: need more than {context_rows} rows when the context is read from the file")
        return TimeSeriesDataset(values[context_rows:], values[:context_rows])
    fill = float(values.mean())
    if lags > 0:
        warnings.warn(
            f"no initial context for {path.name}; padding {lags} values with the series mean {fill:.6g}",
            stacklevel=2,
        )
    return TimeSeriesDataset(values, np.full(lags, fill), padded=lags > 0)


def write_csv(path, values, header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        for v in np.asarray(values, dtype=float).ravel():
            fh.write(f"{v:.17g}\n")


@dataclass
class Regime:
    """AR regime ``x_t = coef[0] + sum_k coef[k] x_{t-k} + sd * noise``."""

    coef: list
    sd: float

    @property
    def order(self) -> int:
        return len(self.coef) - 1

    def mean(self, history: np.ndarray) -> float:
        # history[-1] is x_{t-1}
        c = np.asarray(self.coef, dtype=float)
        lags = history[::-1][: self.order]
        return float(c[0] + c[1:] @ lags)


@dataclass
class SimulatedSeries:
    dataset: TimeSeriesDataset
    labels: np.ndarray
    spec: dict = field(default_factory=dict)


def _regimes(regimes) -> list[Regime]:
    return [r if isinstance(r, Regime) else Regime(list(r["coef"]), float(r["sd"])) for r in regimes]


DEFAULT_REGIMES = ({"coef": [1.0, 0.5], "sd": 0.3}, {"coef": [-1.0, -0.5], "sd": 0.3})


def simulate_setar(
    n: int,
    seed: int,
    regimes=DEFAULT_REGIMES,
    thresholds=(0.0,),
    delay: int = 1,
    n_context: int = 10,
    burn_in: int = 200,
) -> SimulatedSeries:
    """Self-exciting threshold AR series.

    Regime ``r`` (0-based) is active when ``x_{t-delay}`` lies in
    ``[h_{r-1}, h_r)`` for the sorted thresholds. No stationarity check is
    made; explosive coefficients give explosive series.
    """
    regs = _regimes(regimes)
    h = np.sort(np.atleast_1d(np.asarray(thresholds, dtype=float)))
    if len(regs) != h.size + 1:
        raise DataError("need one more regime than thresholds")
    rng = np.random.default_rng(seed)
    p = max(max(r.order for r in regs), delay, n_context)
    total = p + burn_in + n
    x = np.zeros(total)
    labels = np.zeros(total, dtype=int)
    noise = rng.standard_normal(total)
    for t in range(p, total):
        r = int(np.searchsorted(h, x[t - delay], side="right"))
        labels[t] = r
        x[t] = regs[r].mean(x[:t]) + regs[r].sd * noise[t]
    start = p + burn_in
    spec = {
        "kind": "setar",
        "n": n,
        "seed": seed,
        "regimes": [{"coef": list(map(float, r.coef)), "sd": r.sd} for r in regs],
        "thresholds": h.tolist(),
        "delay": delay,
        "n_context": n_context,
    }
    ds = TimeSeriesDataset(x[start:], x[start - n_context : start])
    return SimulatedSeries(ds, labels[start:], spec)


def simulate_lstar(
    n: int,
    seed: int,
    regimes=DEFAULT_REGIMES,
    threshold: float = 0.0,
    steepness: float = 2.0,
    delay: int = 1,
    n_context: int = 10,
    burn_in: int = 200,
) -> SimulatedSeries:
    """Two-regime logistic smooth-transition AR series.

    The first regime gets weight ``1 / (1 + exp(steepness * (x_{t-delay} - threshold)))``;
    mean and noise scale are mixed with that weight. Labels mark the regime
    with the larger weight.
    """
    regs = _regimes(regimes)
    if len(regs) != 2:
        raise DataError("the smooth-transition generator takes exactly two regimes")
    rng = np.random.default_rng(seed)
    p = max(max(r.order for r in regs), delay, n_context)
    total = p + burn_in + n
    x = np.zeros(total)
    labels = np.zeros(total, dtype=int)
    noise = rng.standard_normal(total)
    for t in range(p, total):
        w = 1.0 / (1.0 + np.exp(steepness * (x[t - delay] - threshold)))
        labels[t] = 0 if w >= 0.5 else 1
        mean = w * regs[0].mean(x[:t]) + (1 - w) * regs[1].mean(x[:t])
        sd = w * regs[0].sd + (1 - w) * regs[1].sd
        x[t] = mean + sd * noise[t]
    start = p + burn_in
    spec = {
        "kind": "lstar",
        "n": n,
        "seed": seed,
        "regimes": [{"coef": list(map(float, r.coef)), "sd": r.sd} for r in regs],
        "threshold": float(threshold),
        "steepness": float(steepness),
        "delay": delay,
        "n_context": n_context,
    }
    ds = TimeSeriesDataset(x[start:], x[start - n_context : start])
    return SimulatedSeries(ds, labels[start:], spec)
