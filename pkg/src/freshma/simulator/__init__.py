"""Slot-level Monte Carlo simulator.

The protocols are implemented from their behavioural rules, node by node or
packet by packet, and share no code with the analytic chain builders.
"""
from __future__ import annotations

import math

from .aoii import TreeSplitter, simulate_aoii
from .base import N_BATCHES, SCHEMES, SimConfig, SimMetrics, substream
from .massive import simulate_massive
from .peak import simulate_fd, simulate_td
from .xd import simulate_xd

_RUNNERS = {
    "polling-aoii": simulate_aoii,
    "aloha-aoii": simulate_aoii,
    "tree-aoii": simulate_aoii,
    "td-peak": simulate_td,
    "fd-peak": simulate_fd,
    "xd-policy": simulate_xd,
    "meanfield-reference": simulate_massive,
}


def simulate(config: SimConfig) -> SimMetrics:
    """Run one simulation; the result depends only on ``config``.

    Parameter keys by scheme:

    * ``polling-aoii``, ``aloha-aoii``, ``tree-aoii``: ``M``, ``N``, ``c``,
      ``lambda`` and, for tree splitting, ``R`` (default 3).
    * ``td-peak``: ``Z1``, ``Z2``, ``c``, ``N``, ``lambda``, ``cra``
      (``tree`` or ``aloha``), ``R``, ``placement``.
    * ``fd-peak``: ``K``, ``c``, ``lambda``, ``w1``, ``N1``, ``N2``.  The
      horizon and warm-up are measured in slots and converted to frames.
    * ``xd-policy``: ``M``, ``N2``, ``c``, ``lambda``, ``i_max``, ``Q0max``,
      ``policy``.
    * ``meanfield-reference``: ``M``, ``c``, ``lambda``, ``mode``
      (``peak`` or ``aoii``), ``reservation``, ``gamma``.
    """
    return _RUNNERS[config.scheme](config)


def little_consistency(metrics: SimMetrics) -> float:
    """``|L / lambda' - W| / W`` from one run's queue estimators.

    Zero for runs without deliveries (e.g. ``lambda = 0``) and NaN for
    freshest-only (AoII) runs, which keep no queue.
    """
    if not metrics.has_queue:
        return math.nan
    if metrics.deliveries == 0 or metrics.throughput <= 0 or metrics.mean_sojourn <= 0:
        return 0.0
    return abs(metrics.mean_occupancy / metrics.throughput - metrics.mean_sojourn) / metrics.mean_sojourn


def little_tolerance(metrics: SimMetrics, k: float = 3.0) -> float:
    """``k`` combined standard errors of the two Little estimators, relative to ``W``."""
    if not metrics.has_queue or metrics.mean_sojourn <= 0:
        return math.inf
    se = math.hypot(metrics.std_errors.get("little_ratio", math.inf),
                    metrics.std_errors.get("mean_sojourn", math.inf))
    return k * se / metrics.mean_sojourn


__all__ = [
    "N_BATCHES", "SCHEMES", "SimConfig", "SimMetrics", "TreeSplitter", "little_consistency", "little_tolerance",
    "simulate", "substream",
]
