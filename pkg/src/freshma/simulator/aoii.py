"""Slot simulators for the average AoII under polling and random access.

Each node stores only its freshest status change.  A node is *stale* while
the receiver's copy is outdated, and its AoII is the number of slots since
it became stale, capped at ``N``.  Within a slot the access protocol acts
first.  Then every node sees Poisson arrivals at rate ``lambda / M``: an
up-to-date node goes stale with probability ``1 - exp(-lambda / M)`` and a
stale node just ages.
"""
from __future__ import annotations

import math

import numpy as np

from .base import PROTOCOL, NodeArrivals, SimConfig, SimMetrics, UniformPool, batch_sums, record, substream


class TreeSplitter:
    """Binary tree splitting with at most ``R`` split layers.

    Members carry a layer number.  The open layers form a stack whose top is
    the layer that transmits in the next contention slot.
    """

    def __init__(self, R: int, pool: UniformPool):
        self.R = R
        self.pool = pool
        self.layer: dict = {}
        self.stack: list[int] = []

    @property
    def running(self) -> bool:
        return bool(self.stack)

    def open(self, members) -> None:
        for m in members:
            self.layer[m] = 0
        self.stack = [0]

    def contend(self):
        """Run one contention slot; return the successful member or ``None``."""
        x = self.stack[-1]
        senders = [k for k, v in self.layer.items() if v == x]
        if not senders:
            self.stack.pop()
            return None
        if len(senders) == 1:
            w = senders[0]
            del self.layer[w]
            self.stack.pop()
            return w
        if x == self.R:
            # unresolved at the deepest layer: these members leave the period
            for k in senders:
                del self.layer[k]
            self.stack.pop()
            return None
        for k in senders:
            if self.pool.next() < 0.5:
                self.layer[k] = x + 1
        self.stack.append(x + 1)
        return None


def _aloha_winner(contenders: list, pool: UniformPool):
    """Each contender transmits with probability ``1/n``; success iff exactly one does."""
    n = len(contenders)
    if n == 0:
        return None
    if n == 1:
        return contenders[0]
    p = 1.0 / n
    sent = [i for i in contenders if pool.next() < p]
    return sent[0] if len(sent) == 1 else None


def _params(cfg: SimConfig):
    M = int(cfg.param("M", required=True))
    N = int(cfg.param("N", required=True))
    c = int(cfg.param("c", required=True))
    lam = float(cfg.param("lambda", required=True))
    return M, N, c, lam


def simulate_aoii(cfg: SimConfig) -> SimMetrics:
    """Polling, Aloha or tree-splitting AoII run (``cfg.scheme`` selects)."""
    M, N, c, lam = _params(cfg)
    R = int(cfg.param("R", 3))
    H, W = cfg.horizon_slots, cfg.warmup_slots
    a_bar = -math.expm1(-lam / M)
    arrivals = iter(NodeArrivals(cfg.seed, M, a_bar))
    pool = UniformPool(substream(cfg.seed, PROTOCOL))
    ages = [0] * M
    age_sum = np.empty(H)
    delivered = np.zeros(H)
    td, tx = 0, -1
    pointer = M - 1
    tree = TreeSplitter(R, pool) if cfg.scheme == "tree-aoii" else None
    scheme = cfg.scheme
    nodes = range(M)
    for t in range(H):
        if td > 0:
            if td == 1:
                ages[tx] = 0
                delivered[t] = 1.0
                tx = -1
            td -= 1
        elif scheme == "polling-aoii":
            # ask the next node; an up-to-date node costs this one slot only
            pointer = pointer + 1 if pointer + 1 < M else 0
            if ages[pointer] > 0:
                td, tx = c, pointer
        elif scheme == "aloha-aoii":
            w = _aloha_winner([i for i in nodes if ages[i] > 0], pool)
            if w is not None:
                td, tx = c, w
        else:
            if not tree.running:
                tree.open(i for i in nodes if ages[i] > 0)
            w = tree.contend()
            if w is not None:
                td, tx = c, w
        row = next(arrivals)
        total = 0
        for i in nodes:
            a = ages[i]
            if a == 0:
                if row[i]:
                    ages[i] = 1
                    total += 1
            else:
                a = a + 1 if a < N else N
                ages[i] = a
                total += a
        age_sum[t] = total

    met = SimMetrics(cfg.scheme, cfg.seed, has_queue=False)
    post = age_sum[W:] / M
    counts = batch_sums(np.ones(H - W))
    met.avg_aoii = record(met, "avg_aoii", batch_sums(post) / counts)
    met.throughput = record(met, "throughput", batch_sums(delivered[W:]) / counts)
    met.deliveries = int(delivered[W:].sum())
    met.offered_rate = lam
    return met


__all__ = ["TreeSplitter", "simulate_aoii"]
