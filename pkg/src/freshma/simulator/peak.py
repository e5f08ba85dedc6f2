"""Tandem-queue simulators for the average peak AoII under TD and FD.

Packets (TD) or reservation signals (FD) are tracked individually.  The
average peak AoII is estimated as their mean sojourn time, and the time
average of the queue contents is kept as a second estimator for Little's law.
"""
from __future__ import annotations

import math
from collections import deque

import numpy as np

from .aoii import TreeSplitter, _aloha_winner
from .base import (
    ARRIVALS,
    EPOCHS,
    PROTOCOL,
    SimConfig,
    SimMetrics,
    UniformPool,
    batch_index,
    batch_sums,
    ratio_batches,
    record,
    substream,
    trend_divergent,
)
from ..errors import InvalidParameterError


def _sojourn_batches(dep_index, sojourn, start, length):
    dep_index = np.asarray(dep_index, dtype=np.int64)
    sojourn = np.asarray(sojourn, dtype=float)
    keep = dep_index >= start
    b = batch_index(dep_index[keep], start, length)
    sums = np.bincount(b, weights=sojourn[keep], minlength=20)[:20]
    counts = np.bincount(b, minlength=20)[:20].astype(float)
    return sums, counts


def _finish(met, occ, q1, q2, accepted, offered, dep_index, sojourn, start, length, per_unit=1.0):
    """Fill queue metrics from per-step traces over the post-warmup window."""
    steps = batch_sums(np.ones(length))
    occ_b = batch_sums(occ[start:]) / steps
    met.mean_occupancy = record(met, "mean_occupancy", occ_b)
    met.mean_q1 = record(met, "mean_q1", batch_sums(q1[start:]) / steps)
    met.mean_q2 = record(met, "mean_q2", batch_sums(q2[start:]) / steps)
    acc_b = batch_sums(accepted[start:])
    off_b = batch_sums(offered[start:])
    met.throughput = record(met, "throughput", acc_b / steps)
    met.loss_rate = record(met, "loss_rate", np.where(off_b > 0, 1.0 - ratio_batches(acc_b, off_b), 0.0))
    met.offered_rate = float(off_b.sum() / steps.sum())
    s_sum, s_cnt = _sojourn_batches(dep_index, sojourn, start, length)
    met.deliveries = int(s_cnt.sum())
    met.mean_sojourn = record(met, "mean_sojourn", ratio_batches(s_sum, s_cnt) / per_unit)
    met.divergent = trend_divergent(occ_b)
    # occupancy over accepted throughput, batch by batch, for Little's law
    met.extras["little_ratio"] = record(met, "little_ratio", ratio_batches(occ_b, acc_b / steps))
    return s_sum, s_cnt


# --------------------------------------------------------------------------
# time division
# --------------------------------------------------------------------------

def simulate_td(cfg: SimConfig) -> SimMetrics:
    """Frames of ``Z1`` reservation slots and ``c Z2`` data slots.

    Reservation slots run the collision-resolution algorithm on the queued
    reservation signals unless the transmission queue is full.  A data
    packet leaves at the end of each ``c``-slot transmission.  Up to ``N``
    signals wait for reservation; arrivals beyond that are dropped.
    """
    Z1 = int(cfg.param("Z1", required=True))
    Z2 = int(cfg.param("Z2", required=True))
    c = int(cfg.param("c", required=True))
    N = int(cfg.param("N", required=True))
    lam = float(cfg.param("lambda", required=True))
    kind = cfg.param("cra", "tree")
    R = int(cfg.param("R", 3))
    placement = cfg.param("placement", "completion")
    if kind not in ("tree", "aloha"):
        raise InvalidParameterError(f"unknown CRA {kind!r}")
    T = Z1 + c * Z2
    if placement == "completion":
        departs = {Z1 + j * c for j in range(1, Z2 + 1)}
    elif placement == "printed":
        departs = {Z1 + j * Z2 for j in range(1, c + 1)}
    else:
        raise InvalidParameterError(f"unknown departure placement {placement!r}")

    H, W = cfg.horizon_slots, cfg.warmup_slots
    pool = UniformPool(substream(cfg.seed, PROTOCOL))
    arr = substream(cfg.seed, ARRIVALS, 0).poisson(lam, size=H) if lam > 0 else np.zeros(H, dtype=np.int64)
    tree = TreeSplitter(R, pool) if kind == "tree" else None

    born: dict[int, int] = {}
    q1: list[int] = []        # signals waiting for reservation, by id
    q2: deque[int] = deque()  # reserved packets, FIFO
    next_id = 0
    occ = np.empty(H)
    q1_tr = np.empty(H)
    q2_tr = np.empty(H)
    accepted = np.empty(H)
    dep_slot, soj = [], []
    for t in range(H):
        pos = t % T + 1
        if pos <= Z1:
            if len(q2) < N:
                if tree is not None:
                    if not tree.running:
                        tree.open(q1)
                    w = tree.contend()
                else:
                    w = _aloha_winner(q1, pool)
                if w is not None:
                    q1.remove(w)
                    q2.append(w)
        elif pos in departs and q2:
            k = q2.popleft()
            dep_slot.append(t)
            soj.append(t - born.pop(k))
        a = int(arr[t])
        take = min(a, N - len(q1))
        for _ in range(take):
            born[next_id] = t
            q1.append(next_id)
            next_id += 1
        accepted[t] = take
        q1_tr[t] = len(q1)
        q2_tr[t] = len(q2)
        occ[t] = q1_tr[t] + q2_tr[t]

    met = SimMetrics(cfg.scheme, cfg.seed)
    _finish(met, occ, q1_tr, q2_tr, accepted, arr.astype(float), dep_slot, soj, W, H - W)
    met.avg_peak_aoii = met.mean_sojourn
    met.half_widths["avg_peak_aoii"] = met.half_widths["mean_sojourn"]
    met.std_errors["avg_peak_aoii"] = met.std_errors["mean_sojourn"]
    return met


# --------------------------------------------------------------------------
# frequency division
# --------------------------------------------------------------------------

def simulate_fd(cfg: SimConfig) -> SimMetrics:
    """Frame-level FD run.

    A frame lasts ``K T2`` with ``T2 = c / (1 - w1)``.  It holds
    ``floor(x)`` reservation slots with probability ``sigma`` and
    ``floor(x) + 1`` otherwise, where ``x = K T2 w1``.  In each slot the
    queued signals play queue-aware Aloha, then a Poisson number of new
    signals (mean ``lambda T1 / K``) arrives at epochs uniform over that
    slot's share of the frame.  At the frame end the head of the
    transmission queue departs and the frame's successes join it.
    """
    K = int(cfg.param("K", 1))
    c = float(cfg.param("c", required=True))
    lam = float(cfg.param("lambda", required=True))
    w1 = float(cfg.param("w1", required=True))
    N1 = int(cfg.param("N1", 30))
    N2 = int(cfg.param("N2", 30))
    if not 0 < w1 < 1:
        raise InvalidParameterError(f"w1 must lie in (0, 1), got {w1}")
    T1, T2 = 1.0 / w1, c / (1.0 - w1)
    F = K * T2
    x = F / T1
    lo = math.floor(x)
    sigma = 1.0 - x + lo
    rate = lam * T1 / K

    frames_total = max(int(cfg.horizon_slots / F), 20)
    frames_warm = min(int(cfg.warmup_slots / F), frames_total - 20)
    pool = UniformPool(substream(cfg.seed, PROTOCOL))
    arr_rng = substream(cfg.seed, ARRIVALS, 0)
    epoch_pool = UniformPool(substream(cfg.seed, EPOCHS))

    born: dict[int, tuple[int, float]] = {}
    q1: list[int] = []
    q2: deque[int] = deque()
    next_id = 0
    occ = np.empty(frames_total)
    q1_tr = np.empty(frames_total)
    q2_tr = np.empty(frames_total)
    accepted = np.zeros(frames_total)
    offered = np.zeros(frames_total)
    dep_frame, soj_time, soj_frames = [], [], []
    for f in range(frames_total):
        n_slots = lo if pool.next() < sigma else lo + 1
        start = f * F
        new = arr_rng.poisson(rate, size=n_slots) if rate > 0 else np.zeros(n_slots, dtype=np.int64)
        won: list[int] = []
        for j in range(n_slots):
            w = _aloha_winner(q1, pool)
            if w is not None:
                q1.remove(w)
                won.append(w)
            for _ in range(int(new[j])):
                born[next_id] = (f, start + (j + epoch_pool.next()) * F / n_slots)
                q1.append(next_id)
                next_id += 1
        got = int(sum(new))
        offered[f] = got
        end = start + F
        if q2:
            k = q2.popleft()
            f0, tau = born.pop(k)
            dep_frame.append(f)
            soj_time.append(end - tau)
            soj_frames.append(f - f0)
        lost = 0
        for k in won:
            if len(q2) < N2:
                q2.append(k)
            else:
                born.pop(k)
                lost += 1
        while len(q1) > N1:
            born.pop(q1.pop())
            lost += 1
        accepted[f] = got - lost
        q1_tr[f] = len(q1)
        q2_tr[f] = len(q2)
        occ[f] = q1_tr[f] + q2_tr[f]

    met = SimMetrics(cfg.scheme, cfg.seed, time_unit="frame")
    length = frames_total - frames_warm
    _finish(met, occ, q1_tr, q2_tr, accepted, offered, dep_frame, soj_frames, frames_warm, length)
    t_sum, t_cnt = _sojourn_batches(dep_frame, soj_time, frames_warm, length)
    met.avg_peak_aoii = record(met, "avg_peak_aoii", ratio_batches(t_sum, t_cnt))
    return met


__all__ = ["simulate_fd", "simulate_td"]
