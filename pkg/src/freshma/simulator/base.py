"""Configuration, metrics, random streams and batch-means statistics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from scipy import stats

from ..errors import InvalidParameterError

SCHEMES = ("polling-aoii", "aloha-aoii", "tree-aoii", "td-peak", "fd-peak", "xd-policy", "meanfield-reference")
N_BATCHES = 20


@dataclass(frozen=True)
class SimConfig:
    """One simulation run.

    ``parameters`` is a scheme-specific mapping; see :func:`simulate` for the
    keys each scheme reads.
    """

    scheme: str
    parameters: dict
    horizon_slots: int
    warmup_slots: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InvalidParameterError(f"unknown scheme {self.scheme!r}; choose from {', '.join(SCHEMES)}")
        if int(self.horizon_slots) != self.horizon_slots or int(self.warmup_slots) != self.warmup_slots:
            raise InvalidParameterError("horizon and warmup must be integers")
        if not self.horizon_slots > self.warmup_slots >= 0:
            raise InvalidParameterError(
                f"need horizon > warmup >= 0, got horizon={self.horizon_slots}, warmup={self.warmup_slots}")
        if self.horizon_slots - self.warmup_slots < N_BATCHES:
            raise InvalidParameterError(f"need at least {N_BATCHES} post-warmup slots for batch means")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise InvalidParameterError("seed must be a 64-bit unsigned integer")

    def param(self, name: str, default: Any = None, *, required: bool = False):
        if name in self.parameters:
            return self.parameters[name]
        if required:
            raise InvalidParameterError(f"scheme {self.scheme} needs parameter {name!r}")
        return default


@dataclass
class SimMetrics:
    """Estimates from one run; ``half_widths`` holds 95% batch-means half-widths.

    ``mean_occupancy``, ``throughput`` and ``mean_sojourn`` share one time
    unit (``time_unit``) so that Little's law can be checked directly.
    """

    scheme: str
    seed: int
    avg_aoii: float = 0.0
    avg_peak_aoii: float = 0.0
    mean_q1: float = 0.0
    mean_q2: float = 0.0
    loss_rate: float = 0.0
    throughput: float = 0.0
    mean_occupancy: float = 0.0
    mean_sojourn: float = 0.0
    avg_cost: float = 0.0
    offered_rate: float = 0.0
    deliveries: int = 0
    time_unit: str = "slot"
    divergent: bool = False
    half_widths: dict = field(default_factory=dict)
    std_errors: dict = field(default_factory=dict)
    has_queue: bool = True
    extras: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def substream(seed: int, *key: int) -> np.random.Generator:
    """Philox generator for the substream ``key`` of ``seed``.

    Streams are keyed by small integers, e.g. ``(0,)`` for protocol draws and
    ``(1, node)`` for the arrivals of one node, so adding nodes never shifts
    the draws of existing ones.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


PROTOCOL, ARRIVALS, EPOCHS = 0, 1, 2


def batch_sums(values: np.ndarray, n_batches: int = N_BATCHES) -> np.ndarray:
    """Sums over ``n_batches`` contiguous, nearly equal blocks."""
    values = np.asarray(values)
    edges = np.linspace(0, values.size, n_batches + 1).round().astype(int)
    if values.size >= n_batches:
        return np.add.reduceat(values, edges[:-1])
    # fewer values than batches: some batches stay empty
    idx = np.searchsorted(edges, np.arange(values.size), side="right") - 1
    return np.bincount(idx, weights=values, minlength=n_batches)


def batch_index(slots: np.ndarray, start: int, length: int, n_batches: int = N_BATCHES) -> np.ndarray:
    """Batch of each post-warmup slot index, consistent with :func:`batch_sums`."""
    edges = np.linspace(0, length, n_batches + 1).round().astype(int)
    return np.searchsorted(edges, np.asarray(slots) - start, side="right") - 1


def mean_and_se(batch_values: np.ndarray) -> tuple[float, float]:
    """Grand mean of batch estimates and its standard error."""
    v = np.asarray(batch_values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), math.inf
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def half_width(se: float, n_batches: int = N_BATCHES) -> float:
    if not math.isfinite(se):
        return se
    return float(stats.t.ppf(0.975, n_batches - 1) * se)


def ratio_batches(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """Batch ratios; ``0/0`` counts as 0 (nothing happened), ``x/0`` as NaN."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    safe = np.where(den > 0, den, 1.0)
    return np.where(den > 0, num / safe, np.where(num == 0, 0.0, np.nan))


def trend_divergent(batch_occupancy: np.ndarray) -> bool:
    """Queue-trend test: a steep, significant rise across batches."""
    y = np.asarray(batch_occupancy, dtype=float)
    if y.size < 4 or not np.all(np.isfinite(y)) or y.max() <= 0:
        return False
    res = stats.linregress(np.arange(y.size), y)
    if not math.isfinite(res.stderr) or res.stderr == 0:
        return bool(res.slope > 0 and y[-1] > 1.5 * y[0] + 1)
    q = max(1, y.size // 4)
    return bool(res.slope / res.stderr > 4 and y[-q:].mean() > 1.5 * y[:q].mean() + 1)


def record(metrics: SimMetrics, name: str, batch_values: np.ndarray) -> float:
    m, se = mean_and_se(batch_values)
    metrics.std_errors[name] = se
    metrics.half_widths[name] = half_width(se)
    return m


class UniformPool:
    """Buffered uniform draws from one generator, consumed one at a time."""

    def __init__(self, rng: np.random.Generator, size: int = 1 << 16):
        self.rng = rng
        self.size = size
        self._buf = rng.random(size)
        self._i = 0

    def next(self) -> float:
        if self._i == self.size:
            self._buf = self.rng.random(self.size)
            self._i = 0
        u = self._buf[self._i]
        self._i += 1
        return float(u)

    def below(self, n: int) -> int:
        """Uniform integer in ``0..n-1``."""
        return min(int(self.next() * n), n - 1)


class NodeArrivals:
    """Per-node Bernoulli arrival indicators, one independent substream per node.

    Iterating yields one boolean row of length ``M`` per slot.
    """

    def __init__(self, seed: int, num_nodes: int, p: float, chunk: int = 1 << 15):
        self.gens = [substream(seed, ARRIVALS, i) for i in range(num_nodes)]
        self.p = p
        self.chunk = chunk

    def block(self, count: int) -> np.ndarray:
        if self.p <= 0:
            return np.zeros((count, len(self.gens)), dtype=bool)
        return np.column_stack([g.random(count) < self.p for g in self.gens])

    def __iter__(self):
        while True:
            blk = self.block(self.chunk)
            yield from blk


__all__ = [
    "ARRIVALS", "EPOCHS", "N_BATCHES", "NodeArrivals", "PROTOCOL", "SCHEMES", "SimConfig", "SimMetrics", "UniformPool", "batch_index",
    "batch_sums", "half_width", "mean_and_se", "ratio_batches", "record", "substream", "trend_divergent",
]
