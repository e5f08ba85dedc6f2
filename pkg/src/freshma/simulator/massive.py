"""Reference system with many nodes for the mean-field models.

``M`` nodes share one channel.  While a node transmits, every slot is a data
slot.  Otherwise the slot is a reservation slot among the nodes that wait
for access.  Under ``reservation="gamma"`` such a slot succeeds with
probability ``gamma`` (one uniformly chosen winner) whenever somebody
contends.  Under ``"aloha"`` every contender transmits with probability
``1/n`` and the slot succeeds iff exactly one does.  Each node sees at most
one new packet per slot, with probability ``lambda / M``.

``mode="peak"``
    Nodes queue every packet.  The winner sends its whole backlog back to
    back, ``c`` slots per packet, including packets that arrive meanwhile.
``mode="aoii"``
    Nodes keep the freshest status only.  A stale node contends, and the
    winner needs ``c`` data slots to bring the receiver up to date.  It then
    stays up to date for at least one slot.
"""
from __future__ import annotations

import math
from collections import deque

import numpy as np

from .base import (
    PROTOCOL,
    NodeArrivals,
    SimConfig,
    SimMetrics,
    UniformPool,
    batch_sums,
    record,
    substream,
)
from .peak import _finish
from ..errors import InvalidParameterError


class _Contenders:
    """Set with O(1) insert, delete and uniform sampling."""

    def __init__(self):
        self.items: list[int] = []
        self.pos: dict[int, int] = {}

    def __len__(self):
        return len(self.items)

    def add(self, x: int) -> None:
        self.pos[x] = len(self.items)
        self.items.append(x)

    def remove(self, x: int) -> None:
        i = self.pos.pop(x)
        last = self.items.pop()
        if last != x:
            self.items[i] = last
            self.pos[last] = i

    def pick(self, k: int) -> int:
        return self.items[k]


def _winner(cont: _Contenders, rule: str, gamma: float, pool: UniformPool, rng: np.random.Generator):
    n = len(cont)
    if n == 0:
        return None
    if rule == "gamma":
        if pool.next() >= gamma:
            return None
    elif n > 1 and rng.binomial(n, 1.0 / n) != 1:
        return None
    w = cont.pick(pool.below(n))
    cont.remove(w)
    return w


def simulate_massive(cfg: SimConfig) -> SimMetrics:
    M = int(cfg.param("M", required=True))
    c = int(cfg.param("c", required=True))
    lam = float(cfg.param("lambda", required=True))
    mode = cfg.param("mode", "peak")
    rule = cfg.param("reservation", "gamma")
    gamma = float(cfg.param("gamma", math.exp(-1.0)))
    if mode not in ("peak", "aoii"):
        raise InvalidParameterError(f"unknown mode {mode!r}")
    if rule not in ("gamma", "aloha"):
        raise InvalidParameterError(f"unknown reservation rule {rule!r}")
    if not 0 <= lam <= M:
        raise InvalidParameterError("lambda / M must be a probability")
    if mode == "peak":
        return _run_peak(cfg, M, c, lam, rule, gamma)
    return _run_aoii(cfg, M, c, lam, rule, gamma)


def _run_peak(cfg, M, c, lam, rule, gamma):
    H, W = cfg.horizon_slots, cfg.warmup_slots
    arrivals = iter(NodeArrivals(cfg.seed, M, lam / M))
    pool = UniformPool(substream(cfg.seed, PROTOCOL))
    rng = substream(cfg.seed, PROTOCOL, 1)
    queues = [deque() for _ in range(M)]
    cont = _Contenders()
    tx, td = -1, 0
    total = 0
    occ = np.empty(H)
    zeros = np.zeros(H)
    accepted = np.empty(H)
    dep_slot, soj = [], []
    for t in range(H):
        finished = False
        if tx >= 0:
            if td < c:
                td += 1
            else:
                dep_slot.append(t)
                soj.append(t - queues[tx].popleft())
                total -= 1
                finished = True
        else:
            w = _winner(cont, rule, gamma, pool, rng)
            if w is not None:
                tx, td = w, 1
        hits = np.flatnonzero(next(arrivals))
        for i in hits:
            i = int(i)
            if not queues[i] and i != tx:
                cont.add(i)
            queues[i].append(t)
        total += hits.size
        accepted[t] = hits.size
        if finished:
            if queues[tx]:
                td = 1
            else:
                tx, td = -1, 0
        occ[t] = total

    met = SimMetrics(cfg.scheme, cfg.seed)
    _finish(met, occ / M, occ / M, zeros, accepted / M, accepted / M, dep_slot, soj, W, H - W)
    met.avg_peak_aoii = met.mean_sojourn
    met.half_widths["avg_peak_aoii"] = met.half_widths["mean_sojourn"]
    met.std_errors["avg_peak_aoii"] = met.std_errors["mean_sojourn"]
    return met


def _run_aoii(cfg, M, c, lam, rule, gamma):
    H, W = cfg.horizon_slots, cfg.warmup_slots
    arrivals = iter(NodeArrivals(cfg.seed, M, lam / M))
    pool = UniformPool(substream(cfg.seed, PROTOCOL))
    rng = substream(cfg.seed, PROTOCOL, 1)
    fresh = [True] * M
    born = [0] * M
    cont = _Contenders()
    tx, left = -1, 0
    active, born_sum = 0, 0
    age = np.empty(H)
    delivered = np.zeros(H)
    for t in range(H):
        age[t] = active * t - born_sum
        done = -1
        if tx >= 0:
            left -= 1
            if left == 0:
                done, tx = tx, -1
        else:
            w = _winner(cont, rule, gamma, pool, rng)
            if w is not None:
                tx, left = w, c
        for i in np.flatnonzero(next(arrivals)):
            i = int(i)
            if fresh[i] and i != done:
                fresh[i] = False
                born[i] = t
                active += 1
                born_sum += t
                cont.add(i)
        if done >= 0:
            fresh[done] = True
            active -= 1
            born_sum -= born[done]
            delivered[t] = 1.0

    met = SimMetrics(cfg.scheme, cfg.seed, has_queue=False)
    steps = batch_sums(np.ones(H - W))
    met.avg_aoii = record(met, "avg_aoii", batch_sums(age[W:] / M) / steps)
    met.throughput = record(met, "throughput", batch_sums(delivered[W:]) / steps)
    met.deliveries = int(delivered[W:].sum())
    met.offered_rate = lam
    return met


__all__ = ["simulate_massive"]
