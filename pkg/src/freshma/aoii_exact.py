"""Full-state Markov chains for the average AoII of polling and random access.

Every node keeps only its freshest packet, so its state is the age ``q`` of
that packet (``0`` when the receiver is up to date) capped at ``N``.  A slot
is processed in two steps.  Step 1 applies the access protocol, which is
deterministic for polling and driven by the collision-resolution algorithm
for random access.  Step 2 applies the independent per-node arrival kernel.
"""
from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp

from .core import (
    MixedRadixSpace,
    SparseStochasticMatrix,
    SteadyState,
    StateSpace,
    TableSpace,
    solve_steady_state,
)
from .cra import COLLISION, IDLE, NONE, SUCCESS, CraSpec, active_layer, aloha_gamma, tree_outcomes
from .errors import InvalidParameterError, ModelConstructionError, StateSpaceTooLargeError

DEFAULT_MAX_STATES = 2_000_000

Transitions = list  # list[tuple[float, tuple]]


@dataclass
class AoiiChain:
    """A constructed AoII chain together with the per-state mean age."""

    space: StateSpace
    matrix: SparseStochasticMatrix
    params: dict
    scheme: str
    mean_age: np.ndarray
    cap_indicator: np.ndarray
    _steady: SteadyState | None = field(default=None, repr=False)

    @property
    def dimension(self) -> int:
        return self.matrix.dimension

    def steady_state(self, method: str = "auto") -> SteadyState:
        if self._steady is None or method != "auto":
            st = solve_steady_state(self.matrix, method=method)
            if method != "auto":
                return st
            self._steady = st
        return self._steady


def arrival_step_kernel(age: int, a_bar: float, N: int | None = None) -> dict[int, float]:
    """Distribution of a node's age after the arrival step.

    An up-to-date node (``age == 0``) becomes stale with probability
    ``a_bar``; a stale node ages by one, saturating at ``N``.
    """
    if not 0.0 <= a_bar <= 1.0:
        raise InvalidParameterError(f"a_bar must be a probability, got {a_bar}")
    if age == 0:
        out = {0: 1.0 - a_bar}
        if a_bar > 0:
            out[1] = out.get(1, 0.0) + a_bar
        return {k: v for k, v in out.items() if v > 0}
    nxt = age + 1 if N is None else min(age + 1, N)
    return {nxt: 1.0}


def _arrival_outcomes(ages, a_bar: float, N: int):
    per_node = [tuple(arrival_step_kernel(q, a_bar, N).items()) for q in ages]
    for combo in itertools.product(*per_node):
        p = 1.0
        for _, w in combo:
            p *= w
        yield p, tuple(v for v, _ in combo)


def _check_common(M, N, c, lam):
    for name, v in (("M", M), ("N", N), ("c", c)):
        if int(v) != v or v < 1:
            raise InvalidParameterError(f"{name} must be a positive integer, got {v}")
    if not (lam >= 0 and math.isfinite(lam)):
        raise InvalidParameterError(f"lambda must be finite and >= 0, got {lam}")


def _assemble(rows, cols, vals, n):
    m = sp.coo_matrix((np.asarray(vals, float), (np.asarray(rows, np.int64), np.asarray(cols, np.int64))),
                      shape=(n, n)).tocsr()
    return SparseStochasticMatrix(m)


# --------------------------------------------------------------------------
# polling
# --------------------------------------------------------------------------

def polling_step1(state, M: int, c: int, service: str = "single"):
    """Deterministic protocol step of the polling chain.

    ``state`` is ``(s, q_1, ..., q_M, t_d)`` with ``s`` in ``1..M``.
    """
    s, ages, td = state[0], list(state[1:-1]), state[-1]
    if td == 0:
        s2 = s + 1 if s < M else 1
        q = ages[s2 - 1]
        td2 = (c if q > 0 else 0) if service == "single" else q * c
        return (s2, *ages, td2)
    if td == 1:
        ages[s - 1] = 0
    return (s, *ages, td - 1)


def build_polling_aoii_chain(M: int, N: int, c: int, lam: float, *, service: str = "single",
                             max_states: int = DEFAULT_MAX_STATES) -> AoiiChain:
    """Polling chain over ``(s, q_1..q_M, t_d)``.

    Parameters
    ----------
    service : {"single", "age"}
        ``single`` transmits the freshest packet in ``c`` slots whenever the
        polled node is stale.  ``age`` makes the service time ``q * c``.
    """
    _check_common(M, N, c, lam)
    if service not in ("single", "age"):
        raise InvalidParameterError(f"unknown service rule {service!r}")
    td_max = c if service == "single" else N * c
    space = MixedRadixSpace([(1, M)] + [(0, N)] * M + [(0, td_max)],
                            names=["s"] + [f"q{i + 1}" for i in range(M)] + ["td"])
    if space.size > max_states:
        raise StateSpaceTooLargeError(f"polling chain needs {space.size} states (> {max_states})")
    a_bar = -math.expm1(-lam / M)
    rows, cols, vals = [], [], []
    mean_age = np.empty(space.size)
    cap = np.empty(space.size)
    for idx in range(space.size):
        st = space.decode(idx)
        mid = polling_step1(st, M, c, service)
        ages = st[1:-1]
        mean_age[idx] = sum(ages) / M
        cap[idx] = float(max(ages) >= N)
        for p, new_ages in _arrival_outcomes(mid[1:-1], a_bar, N):
            rows.append(idx)
            cols.append(space.encode((mid[0], *new_ages, mid[-1])))
            vals.append(p)
    P = _assemble(rows, cols, vals, space.size)
    return AoiiChain(space, P, dict(M=M, N=N, c=c, lam=lam, service=service), "polling", mean_age, cap)


# --------------------------------------------------------------------------
# random access
# --------------------------------------------------------------------------

NO_TX = -1
OUT = -1  # node layer meaning "not in the current CRP"


def _layers_consistent(m, e) -> bool:
    x = active_layer(m)
    for k in range(x + 1):
        if m[k] != sum(1 for v in e if v >= k):
            return False
    return all(v == OUT for v in e) if x < 0 else all(v <= x for v in e)


def ra_step1(state, M: int, c: int, cra: CraSpec) -> Transitions:
    """Protocol step of the random-access chain.

    ``state`` is ``(m, e, q, t_d, tx)``: the CRA state, per-node layers
    (``-1`` outside the CRP), ages, remaining transmission slots and the
    transmitting node (``-1`` when nobody transmits).
    """
    m, e, q, td, tx = state
    if td > 0:
        if td == 1:
            q2 = list(q)
            q2[tx] = 0
            return [(1.0, (m, e, tuple(q2), 0, NO_TX))]
        return [(1.0, (m, e, q, td - 1, tx))]

    if cra.kind == "aloha":
        waiting = [i for i in range(M) if q[i] > 0]
        n = len(waiting)
        g = aloha_gamma(n)
        out = []
        if g < 1.0:
            out.append((1.0 - g, (m, e, q, 0, NO_TX)))
        for i in waiting:
            out.append((g / n, (m, e, q, c, i)))
        return out

    R = cra.params["R"]
    e = list(e)
    if m[0] == -1:
        joiners = [i for i in range(M) if q[i] > 0]
        if len(joiners) > cra.n_max:
            raise ModelConstructionError(f"{len(joiners)} contenders exceed the CRA cap {cra.n_max}")
        m = (len(joiners),) + m[1:]
        for i in joiners:
            e[i] = 0
    x = active_layer(m)
    senders = [i for i in range(M) if e[i] == x]
    if len(senders) != m[x]:
        raise ModelConstructionError(f"layer {x} holds {len(senders)} nodes but the CRA state says {m[x]}")
    out = []
    for p, m2, ev in tree_outcomes(m, R):
        if ev == IDLE:
            out.append((p, (m2, tuple(e), q, 0, NO_TX)))
        elif ev == SUCCESS:
            (w,) = senders
            e2 = list(e)
            e2[w] = OUT
            out.append((p, (m2, tuple(e2), q, c, w)))
        elif x == R:
            e2 = [OUT if v == R else v for v in e]
            out.append((p, (m2, tuple(e2), q, 0, NO_TX)))
        else:
            k = m2[x + 1]
            subsets = list(itertools.combinations(senders, k))
            share = p / len(subsets)
            for sub in subsets:
                e2 = list(e)
                for i in sub:
                    e2[i] = x + 1
                out.append((share, (m2, tuple(e2), q, 0, NO_TX)))
    return out


def build_ra_aoii_chain(M: int, N: int, c: int, lam: float, cra: CraSpec, *,
                        max_states: int = DEFAULT_MAX_STATES, check_layers: bool = True) -> AoiiChain:
    """Random-access chain over the states reachable from the empty system.

    Infeasible joint states, whose CRA counts disagree with the node layers,
    are never generated, so the chain carries no junk rows.
    """
    _check_common(M, N, c, lam)
    if cra.kind == "tree" and cra.n_max < M:
        raise InvalidParameterError(f"tree CRA must admit M={M} packets per CRP, has N={cra.n_max}")
    a_bar = -math.expm1(-lam / M)
    if cra.kind == "tree":
        m0 = tuple([-1] * (cra.params["R"] + 1))
        e0 = tuple([OUT] * M)
    else:
        m0, e0 = (), ()
    start = (m0, e0, tuple([0] * M), 0, NO_TX)

    trans: dict = {}
    seen = {start}
    queue = deque([start])
    # λ = 0 keeps the chain on its start state; use a positive probe rate to
    # enumerate the same state set for every λ.
    probe = a_bar if a_bar > 0 else 0.5
    while queue:
        st = queue.popleft()
        row = []
        for p1, mid in ra_step1(st, M, c, cra):
            if check_layers and cra.kind == "tree" and not _layers_consistent(mid[0], mid[1]):
                raise ModelConstructionError(f"infeasible joint state {mid}")
            for p2, ages in _arrival_outcomes(mid[2], probe, N):
                nxt = (mid[0], mid[1], ages, mid[3], mid[4])
                row.append((p1, nxt))
                if nxt not in seen:
                    seen.add(nxt)
                    if len(seen) > max_states:
                        raise StateSpaceTooLargeError(f"reachable set exceeds {max_states} states")
                    queue.append(nxt)
        trans[st] = row

    space = TableSpace(seen)
    n = space.size
    rows, cols, vals = [], [], []
    mean_age = np.empty(n)
    cap = np.empty(n)
    for st in space.states:
        i = space.encode(st)
        mean_age[i] = sum(st[2]) / M
        cap[i] = float(max(st[2]) >= N)
        for p1, mid in ra_step1(st, M, c, cra):
            for p2, ages in _arrival_outcomes(mid[2], a_bar, N):
                rows.append(i)
                cols.append(space.encode((mid[0], mid[1], ages, mid[3], mid[4])))
                vals.append(p1 * p2)
    P = _assemble(rows, cols, vals, n)
    params = dict(M=M, N=N, c=c, lam=lam, cra=cra.kind, **{k: v for k, v in cra.params.items()
                                                           if k in ("R",)})
    return AoiiChain(space, P, params, f"ra-{cra.kind}", mean_age, cap)


def average_aoii(chain: AoiiChain, method: str = "auto") -> float:
    """Time-average AoII over nodes, ``E_pi[(1/M) sum_i q_i]``."""
    pi = chain.steady_state(method).probabilities
    return float(pi @ chain.mean_age)


def age_cap_mass(chain: AoiiChain) -> float:
    """Steady-state probability that some node sits at the age cap ``N``."""
    pi = chain.steady_state().probabilities
    return float(pi @ chain.cap_indicator)


__all__ = [
    "AoiiChain", "age_cap_mass", "arrival_step_kernel", "average_aoii", "build_polling_aoii_chain",
    "build_ra_aoii_chain", "polling_step1", "ra_step1",
]
