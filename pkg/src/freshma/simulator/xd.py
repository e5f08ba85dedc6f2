"""Node-level simulator of dynamic bandwidth allocation under a fixed policy.

Every node has its own packet buffer.  A node with packets that holds no
reservation waits in the reservation queue.  A node whose reservation
succeeded waits in the transmission queue.  When the current head finishes,
the next node in the transmission queue becomes head and loads all of its
buffered packets.  The policy sees only the aggregate state
``(phase, q0, q1, q2, q3, s)`` that the analytic model uses.
"""
from __future__ import annotations

import math
from collections import deque
from typing import Callable

import numpy as np

from .aoii import _aloha_winner
from .base import (
    ARRIVALS,
    PROTOCOL,
    SimConfig,
    SimMetrics,
    UniformPool,
    batch_sums,
    ratio_batches,
    record,
    substream,
)
from .peak import _finish
from ..errors import InvalidParameterError, ModelConstructionError

FREE = (0, 1)
EMPTY, RESERVING, RESERVED = 0, 1, 2


def _policy_fn(policy) -> Callable[[tuple], int]:
    if callable(policy):
        return policy
    if isinstance(policy, int):
        return lambda state: policy
    if isinstance(policy, dict):
        def lookup(state):
            try:
                return int(policy[state])
            except KeyError:
                raise ModelConstructionError(f"policy has no action for state {state}") from None
        return lookup
    raise InvalidParameterError("policy must be a mapping, a callable or a fixed action code")


def simulate_xd(cfg: SimConfig) -> SimMetrics:
    """Run a stationary bandwidth policy.

    Parameters read from ``cfg.parameters``: ``M``, ``N2``, ``c``,
    ``lambda``, ``i_max``, ``Q0max`` and ``policy`` (mapping from aggregate
    state to action code, callable, or a fixed code).  Action ``0`` gives the
    whole band to data.  Action ``i`` gives ``1/i`` of it to reservation for
    an interval of ``i`` slots, which ends with one reservation attempt.
    """
    M = int(cfg.param("M", required=True))
    N2 = int(cfg.param("N2", required=True))
    c = int(cfg.param("c", required=True))
    lam = float(cfg.param("lambda", required=True))
    i_max = int(cfg.param("i_max", 2))
    Q0max = int(cfg.param("Q0max", 12))
    choose = _policy_fn(cfg.param("policy", required=True))
    units = math.lcm(*range(1, i_max + 1)) * c
    per_slot = units // c

    H, W = cfg.horizon_slots, cfg.warmup_slots
    pool = UniformPool(substream(cfg.seed, PROTOCOL))
    place = UniformPool(substream(cfg.seed, ARRIVALS, 1))
    arr = substream(cfg.seed, ARRIVALS, 0).poisson(lam, size=H) if lam > 0 else np.zeros(H, dtype=np.int64)

    buf: list[list[int]] = [[] for _ in range(M)]
    status = [EMPTY] * M
    reserving: list[int] = []
    reserved: deque[int] = deque()
    head: list[int] = []
    head_done = 0
    q0 = 0
    q3 = 0
    phase = FREE

    cost = np.empty(H)
    occ = np.empty(H)
    q1_tr = np.empty(H)
    q2_tr = np.empty(H)
    accepted = np.empty(H)
    dep_slot, soj = [], []
    for t in range(H):
        q1, q2 = len(reserving), len(reserved)
        if phase == FREE:
            a = choose((FREE, q0, q1, q2, q3, 0))
        else:
            a = phase[0]
        if a < 0 or a > i_max:
            raise InvalidParameterError(f"action {a} outside 0..{i_max}")
        drain = per_slot if a == 0 else per_slot * (a - 1) // a
        q3 = max(q3 - drain, 0)
        cost[t] = q0 + q3 / units
        if head:
            finished = len(head) - (q3 + units - 1) // units
            while head_done < finished:
                dep_slot.append(t)
                soj.append(t - head[head_done])
                head_done += 1

        if a == 0:
            phase = FREE
        else:
            td = 1 if phase == FREE else phase[1]
            if td < a:
                phase = (a, td + 1)
            else:
                phase = FREE
                if q2 - (1 if q3 == 0 else 0) < N2:
                    w = _aloha_winner(reserving, pool)
                    if w is not None:
                        reserving.remove(w)
                        status[w] = RESERVED
                        reserved.append(w)

        take = min(int(arr[t]), Q0max - q0)
        for _ in range(take):
            n = place.below(M)
            buf[n].append(t)
            if status[n] == EMPTY:
                status[n] = RESERVING
                reserving.append(n)
        q0 += take
        accepted[t] = take

        if q3 == 0 and reserved:
            n = reserved.popleft()
            head, head_done = buf[n], 0
            buf[n] = []
            status[n] = EMPTY
            q0 -= len(head)
            q3 = len(head) * units
        elif q3 == 0:
            head, head_done = [], 0

        q1_tr[t] = len(reserving)
        q2_tr[t] = len(reserved)
        occ[t] = q0 + len(head) - head_done

    met = SimMetrics(cfg.scheme, cfg.seed)
    _finish(met, occ, q1_tr, q2_tr, accepted, arr.astype(float), dep_slot, soj, W, H - W)
    steps = batch_sums(np.ones(H - W))
    cost_b = batch_sums(cost[W:]) / steps
    met.avg_cost = record(met, "avg_cost", cost_b)
    met.avg_peak_aoii = record(met, "avg_peak_aoii", ratio_batches(cost_b, batch_sums(accepted[W:]) / steps))
    return met


__all__ = ["simulate_xd"]
