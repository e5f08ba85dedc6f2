"""Dynamic bandwidth allocation (XD) as an average-cost MDP.

The controller picks, at the start of each reservation interval, the share
``w1`` of the bandwidth given to reservation signals: ``w1 = 0`` (data only)
or ``w1 = 1/i`` for ``i = 1..i_max``, which makes the interval last ``i``
slots.  The node at the head of the transmission queue sends ``(1 - w1)/c``
packets per slot.

State ``(phase, q0, q1, q2, q3, s)``:

``phase``
    ``(0, 1)`` at a decision point, otherwise ``(i, t)`` for slot ``t`` of an
    interval of length ``i``.
``q0``
    Buffered packets at all nodes except those loaded into the head.
``q1``, ``q2``
    Nodes in the reservation queue and waiting in the transmission queue.
``q3``
    Remaining head work as an integer number of units of ``1/D`` packet,
    where ``D = lcm(1..i_max) * c``, so the arithmetic is exact.
``s``
    CRA state index (always ``0`` for a memoryless CRA such as Aloha).
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .core import SparseStochasticMatrix, TableSpace, poisson_pmf_vector, poisson_tail, solve_steady_state
from .cra import CraSpec, aloha_cra
from .errors import ConvergenceError, InvalidParameterError, ModelConstructionError, StateSpaceTooLargeError

FREE = (0, 1)
DEFAULT_MAX_STATES = 400_000


# --------------------------------------------------------------------------
# probability helpers
# --------------------------------------------------------------------------

def xd_head_advance_prob(q0: int, q1: int, q2: int, i: int) -> float:
    """Probability that the next head node holds ``i`` packets.

    Each of the ``q1 + q2`` queued nodes holds one packet and the
    ``q0 - q1 - q2`` extra packets are spread uniformly and independently over
    them, so ``i - 1`` is binomial with success probability ``1/(q1 + q2)``.
    """
    if q2 <= 0:
        raise InvalidParameterError("head advance needs q2 > 0")
    nodes = q1 + q2
    extra = q0 - nodes
    if extra < 0:
        raise InvalidParameterError(f"q0={q0} is below the number of queued nodes {nodes}")
    if not 1 <= i <= extra + 1:
        return 0.0
    if nodes == 1:
        return 1.0 if i == extra + 1 else 0.0
    p = 1.0 / nodes
    k = i - 1
    return math.comb(extra, k) * p ** k * (1.0 - p) ** (extra - k)


def _comb_ext(n: int, k: int) -> int:
    # C(n - 1, -1) counts the empty composition of zero items
    if k == -1:
        return 1 if n == -1 else 0
    if n < 0 or k < 0 or k > n:
        return 0
    return math.comb(n, k)


def xd_new_reservation_prob(M: int, q1: int, q2: int, y: int, j: int) -> float:
    """Bose-Einstein probability that ``j`` of ``y`` new packets land on empty nodes.

    All compositions of ``y`` packets over ``M`` nodes are equally likely;
    ``M - q1 - q2`` nodes are empty.  Summing over ``j = 0..y`` gives one.
    """
    E = M - q1 - q2
    F = q1 + q2
    if E < 0 or y < 0 or not 0 <= j <= y:
        return 0.0
    if E == 0:
        return 1.0 if j == 0 else 0.0
    num = _comb_ext(E + j - 1, E - 1) * _comb_ext(F + y - j - 1, F - 1)
    return num / math.comb(M + y - 1, M - 1)


def iid_new_nodes_prob(M: int, empty: int, y: int, j: int) -> float:
    """Probability that ``y`` packets thrown independently and uniformly onto
    ``M`` nodes hit exactly ``j`` of the ``empty`` nodes."""
    if not 0 <= j <= min(empty, y):
        return 0.0
    if y == 0:
        return 1.0
    occupied = M - empty
    total = sum((-1) ** t * math.comb(j, t) * (occupied + j - t) ** y for t in range(j + 1))
    return math.comb(empty, j) * total / M ** y


# --------------------------------------------------------------------------
# generic finite MDP and value iteration
# --------------------------------------------------------------------------

@dataclass
class FiniteMdp:
    """Tabular MDP stored as one sparse row per (state, action) pair.

    Pair rows are grouped by state and, within a state, ordered by the
    preference used to break ties (first wins).
    """

    n_states: int
    pair_state: np.ndarray
    pair_action: np.ndarray
    kernel: sp.csr_matrix
    cost: np.ndarray

    def __post_init__(self):
        self.pair_state = np.asarray(self.pair_state, dtype=np.int64)
        self.pair_action = np.asarray(self.pair_action)
        self.cost = np.asarray(self.cost, dtype=float)
        self.kernel = sp.csr_matrix(self.kernel)
        if np.any(np.diff(self.pair_state) < 0):
            raise ModelConstructionError("pair rows must be grouped by state")
        if np.unique(self.pair_state).size != self.n_states:
            raise ModelConstructionError("every state needs at least one action")
        self.starts = np.flatnonzero(np.r_[True, np.diff(self.pair_state) != 0])

    @classmethod
    def from_lists(cls, costs: Sequence[Sequence[float]], kernels: Sequence[Sequence[Sequence[float]]],
                   actions: Sequence[Sequence] | None = None) -> "FiniteMdp":
        """``costs[s][a]`` and dense ``kernels[s][a]`` rows over the states."""
        ps, pa, rows, cs = [], [], [], []
        for s, (cost_s, ker_s) in enumerate(zip(costs, kernels)):
            for a, (c, row) in enumerate(zip(cost_s, ker_s)):
                ps.append(s)
                pa.append(actions[s][a] if actions is not None else a)
                rows.append(row)
                cs.append(c)
        return cls(len(costs), np.array(ps), np.array(pa), sp.csr_matrix(np.array(rows, float)), np.array(cs))

    def max_row_error(self) -> float:
        return float(np.max(np.abs(np.asarray(self.kernel.sum(axis=1)).ravel() - 1.0)))

    def policy_matrix(self, pair_index: np.ndarray) -> SparseStochasticMatrix:
        return SparseStochasticMatrix(self.kernel[pair_index])


@dataclass
class ValueIterationResult:
    values: np.ndarray
    average_cost: float
    policy: np.ndarray        # chosen action per state
    policy_pairs: np.ndarray  # chosen pair row per state
    span_at_stop: float
    iterations: int
    spans: np.ndarray
    bounds: tuple[float, float]


def value_iteration(mdp: FiniteMdp, eps: float = 1e-6, *, max_iter: int = 100_000,
                    tau: float = 0.5, tie_tol: float = 1e-9) -> ValueIterationResult:
    """Relative-free value iteration with span stopping.

    Each sweep applies ``v <- min_a {C + tau P_a v + (1 - tau) v}``.  The
    self-loop mixing with weight ``1 - tau`` leaves every policy's average
    cost unchanged and removes periodicity, which the span test needs.
    The average cost estimate is the midpoint of the span bounds.
    """
    if not 0 < tau <= 1:
        raise InvalidParameterError("tau must lie in (0, 1]")
    K = mdp.kernel
    ps = mdp.pair_state
    starts = mdp.starts
    v = np.zeros(mdp.n_states)
    spans = []
    for it in range(1, max_iter + 1):
        q = mdp.cost + tau * (K @ v) + (1.0 - tau) * v[ps]
        v_new = np.minimum.reduceat(q, starts)
        diff = v_new - v
        hi, lo = float(diff.max()), float(diff.min())
        span = hi - lo
        spans.append(span)
        v = v_new
        if span < eps:
            break
        # keep magnitudes bounded; shifts do not change spans or the policy
        v = v - v[0]
    else:
        raise ConvergenceError(f"value iteration did not reach span {eps:g} in {max_iter} sweeps",
                               residual=spans[-1], iterations=max_iter)
    q = mdp.cost + tau * (K @ v) + (1.0 - tau) * v[ps]
    best = np.minimum.reduceat(q, starts)
    ok = q <= best[ps] + tie_tol * (1.0 + np.abs(best[ps]))
    # first admissible pair per state = smallest w1 among near-ties
    idx = np.arange(q.size)
    cand = np.where(ok, idx, q.size)
    chosen = np.minimum.reduceat(cand, starts)
    return ValueIterationResult(v, 0.5 * (hi + lo), mdp.pair_action[chosen], chosen, span, it,
                                np.array(spans), (lo, hi))


# --------------------------------------------------------------------------
# XD model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class XdParams:
    M: int
    N2: int
    c: int
    lam: float
    i_max: int = 2
    Q0max: int = 12
    placement: str = "iid"
    head_sign: str = "subtract"

    def __post_init__(self):
        for name in ("M", "c", "i_max", "Q0max"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise InvalidParameterError(f"{name} must be a positive integer, got {v}")
        if not 0 <= self.N2 <= self.M:
            raise InvalidParameterError(f"N2 must lie in 0..M, got {self.N2}")
        if self.lam < 0 or not math.isfinite(self.lam):
            raise InvalidParameterError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.Q0max < self.M:
            raise InvalidParameterError("Q0max must be at least M")
        if self.placement not in ("iid", "printed"):
            raise InvalidParameterError(f"unknown placement law {self.placement!r}")
        if self.head_sign not in ("subtract", "printed"):
            raise InvalidParameterError(f"unknown head bookkeeping {self.head_sign!r}")

    @property
    def units(self) -> int:
        """Integer work units per packet, ``lcm(1..i_max) * c``."""
        return math.lcm(*range(1, self.i_max + 1)) * self.c

    def drain(self, action: int) -> int:
        """Head work removed in one slot, in units."""
        per_slot = self.units // self.c
        if action == 0:
            return per_slot
        return per_slot * (action - 1) // action

    @property
    def action_order(self) -> tuple[int, ...]:
        """Action codes in ascending ``w1``: 0, then ``i_max, ..., 1``."""
        return (0,) + tuple(range(self.i_max, 0, -1))


def action_w1(code: int) -> float:
    return 0.0 if code == 0 else 1.0 / code


class XdKernel:
    """Two-step transition law for a fixed parameter set."""

    def __init__(self, params: XdParams, cra: CraSpec):
        if cra.kind != "aloha" and not cra.memoryless and cra.n_max < params.M:
            raise InvalidParameterError("CRA must admit M queued signals")
        self.p = params
        self.cra = cra
        self.memoryless = cra.memoryless
        X0, X1 = sp.csr_matrix(cra.X0), sp.csr_matrix(cra.X1)
        self._yx = {}
        for n in range(min(params.M, cra.n_max) + 1):
            Y = cra.Y(n)
            self._yx[n] = ((Y @ X0).tocsr(), (Y @ X1).tocsr())
        self.idle = 0 if self.memoryless else cra.idle_index
        self._pmf = poisson_pmf_vector(params.lam, params.Q0max + 1)

    # step 1 -----------------------------------------------------------
    def actions(self, state) -> tuple[int, ...]:
        phase = state[0]
        if phase == FREE:
            return self.p.action_order
        return (phase[0],)

    def step1(self, state, action: int):
        """Outcomes ``(prob, intermediate_state)`` of the transmission step."""
        phase, q0, q1, q2, q3, s = state
        p = self.p
        q3p = max(q3 - p.drain(action), 0)
        if action == 0:
            if phase != FREE:
                raise ModelConstructionError("w1 = 0 is only available at a decision point")
            return [(1.0, (FREE, q0, q1, q2, q3p, s))]
        i = action
        td = 1 if phase == FREE else phase[1]
        if phase != FREE and phase[0] != i:
            raise ModelConstructionError(f"action 1/{i} conflicts with the running interval {phase}")
        if td < i:
            return [(1.0, ((i, td + 1), q0, q1, q2, q3p, s))]
        # interval ends: one reservation attempt unless the transmission queue is full
        head_leaves = 1 if q3p == 0 else 0
        if q2 - head_leaves >= p.N2:
            return [(1.0, (FREE, q0, q1, q2, q3p, s))]
        yx0, yx1 = self._yx[q1]
        row = self.idle if self.memoryless else s
        out = []
        for mat, succ in ((yx0, 0), (yx1, 1)):
            a, b = mat.indptr[row], mat.indptr[row + 1]
            for col, prob in zip(mat.indices[a:b], mat.data[a:b]):
                if prob <= 0:
                    continue
                s2 = 0 if self.memoryless else int(col)
                out.append((float(prob), (FREE, q0, q1 - succ, q2 + succ, q3p, s2)))
        if self.memoryless:
            merged: dict = {}
            for prob, st in out:
                merged[st] = merged.get(st, 0.0) + prob
            out = [(v, k) for k, v in merged.items()]
        return out

    # step 2 -----------------------------------------------------------
    def step2(self, inter):
        """Outcomes ``(prob, next_state)`` of head advance and arrivals."""
        phase, q0, q1, q2, q3, s = inter
        advance = q3 == 0 and q2 > 0
        out = []
        for prob, q0n, q1n, q2n, load in self._step2_cached(q0, q1, q2, advance):
            q3n = load * self.p.units if advance else q3
            out.append((prob, (phase, q0n, q1n, q2n, q3n, s)))
        return out

    @lru_cache(maxsize=None)
    def _step2_cached(self, q0: int, q1: int, q2: int, advance: bool):
        # arrivals first, then a finished head hands over to the next node,
        # which loads everything buffered at that moment
        p = self.p
        empty = p.M - q1 - q2
        room = p.Q0max - q0
        acc: dict = {}
        for y, wy in self._accepted_arrivals(room):
            for j, wj in self._new_nodes(empty, q1, q2, y):
                q0a, q1a = q0 + y, q1 + j
                if not advance:
                    key = (q0a, q1a, q2, 0)
                    acc[key] = acc.get(key, 0.0) + wy * wj
                    continue
                for load in range(1, q0a - q1a - q2 + 2):
                    wh = xd_head_advance_prob(q0a, q1a, q2, load)
                    if wh <= 0:
                        continue
                    q0n = q0a - load if p.head_sign == "subtract" else min(q0a + load, p.Q0max)
                    key = (q0n, q1a, q2 - 1, load)
                    acc[key] = acc.get(key, 0.0) + wy * wj * wh
        return tuple((w, *k) for k, w in acc.items() if w > 0)

    def _accepted_arrivals(self, room: int):
        lam = self.p.lam
        if lam == 0:
            return [(0, 1.0)]
        out = [(y, float(self._pmf[y])) for y in range(room)]
        out.append((room, poisson_tail(lam, room)))
        return [(y, w) for y, w in out if w > 0]

    def _new_nodes(self, empty: int, q1: int, q2: int, y: int):
        M = self.p.M
        if self.p.placement == "iid":
            return [(j, iid_new_nodes_prob(M, empty, y, j)) for j in range(min(empty, y) + 1)
                    if iid_new_nodes_prob(M, empty, y, j) > 0]
        merged: dict = {}
        for j in range(y + 1):
            w = xd_new_reservation_prob(M, q1, q2, y, j)
            if w > 0:
                merged[min(j, empty)] = merged.get(min(j, empty), 0.0) + w
        return list(merged.items())

    def accepted_mean(self, inter) -> float:
        """Expected accepted arrivals in step 2 from an intermediate state."""
        room = self.p.Q0max - inter[1]
        return sum(y * w for y, w in self._accepted_arrivals(room))

    def transitions(self, state, action: int, *, with_intermediate: bool = False):
        out = []
        for p1, mid in self.step1(state, action):
            for p2, nxt in self.step2(mid):
                out.append((p1 * p2, nxt, mid) if with_intermediate else (p1 * p2, nxt))
        return out

    def cost(self, state, action: int) -> float:
        q3p = max(state[4] - self.p.drain(action), 0)
        return state[1] + q3p / self.p.units

    def start_state(self):
        return (FREE, 0, 0, 0, 0, 0 if self.memoryless else self.idle)


@dataclass
class XdMdp(FiniteMdp):
    space: TableSpace = None
    params: XdParams = None
    accepted: np.ndarray = None
    kernel_law: XdKernel = field(default=None, repr=False)

    @property
    def start_index(self) -> int:
        return self.space.encode(self.kernel_law.start_state())


def build_xd_mdp(M: int, N2: int, c: int, lam: float, i_max: int = 2, Q0max: int = 12,
                 cra: CraSpec | None = None, *, placement: str = "iid", head_sign: str = "subtract",
                 max_states: int = DEFAULT_MAX_STATES) -> XdMdp:
    """Enumerate the reachable XD states and their per-action kernels."""
    params = XdParams(M, N2, c, lam, i_max, Q0max, placement, head_sign)
    cra = aloha_cra(M) if cra is None else cra
    law = XdKernel(params, cra)
    start = law.start_state()
    seen = {start}
    queue = deque([start])
    rows: dict = {}
    while queue:
        st = queue.popleft()
        per_action = []
        for a in law.actions(st):
            trans = law.transitions(st, a)
            inters = law.step1(st, a)
            acc = sum(p1 * law.accepted_mean(mid) for p1, mid in inters)
            per_action.append((a, trans, law.cost(st, a), acc))
            for _, nxt in trans:
                if nxt not in seen:
                    seen.add(nxt)
                    if len(seen) > max_states:
                        raise StateSpaceTooLargeError(f"XD reachable set exceeds {max_states} states")
                    queue.append(nxt)
        rows[st] = per_action
    space = TableSpace(seen)
    ps, pa, costs, accs = [], [], [], []
    r, cidx, vals = [], [], []
    k = 0
    for st in space.states:
        si = space.encode(st)
        for a, trans, cost, acc in rows[st]:
            ps.append(si)
            pa.append(a)
            costs.append(cost)
            accs.append(acc)
            for prob, nxt in trans:
                r.append(k)
                cidx.append(space.encode(nxt))
                vals.append(prob)
            k += 1
    K = sp.coo_matrix((vals, (r, cidx)), shape=(k, space.size)).tocsr()
    K.sum_duplicates()
    return XdMdp(space.size, np.array(ps), np.array(pa), K, np.array(costs), space=space, params=params,
                 accepted=np.array(accs), kernel_law=law)


@dataclass
class XdSolution:
    result: ValueIterationResult
    L_eps: float
    L_policy: float
    lambda_eff: float
    peak_aoii: float
    extreme_fraction: float
    policy: dict


def evaluate_policy(mdp: XdMdp, pairs: np.ndarray) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Average cost and accepted rate of the stationary policy given by pair rows.

    Returns ``(L, lambda_eff, pi, states)`` where ``pi`` is over the states
    reachable from the empty system under the policy.
    """
    K = mdp.kernel[pairs]
    start = mdp.start_index
    reach = {start}
    stack = [start]
    while stack:
        i = stack.pop()
        for j in K.indices[K.indptr[i]:K.indptr[i + 1]]:
            if j not in reach:
                reach.add(int(j))
                stack.append(int(j))
    idx = np.array(sorted(reach))
    sub = K[idx][:, idx]
    pi = solve_steady_state(SparseStochasticMatrix(sub)).probabilities
    return float(pi @ mdp.cost[pairs][idx]), float(pi @ mdp.accepted[pairs][idx]), pi, idx


def solve_xd(mdp: XdMdp, eps: float = 1e-6, **kw) -> XdSolution:
    res = value_iteration(mdp, eps, **kw)
    L_pol, lam_eff, pi, idx = evaluate_policy(mdp, res.policy_pairs)
    peak = res.average_cost / lam_eff if lam_eff > 0 else float("nan")
    free = [i for i in idx if mdp.space.states[i][0] == FREE]
    w = np.array([action_w1(res.policy[i]) for i in free])
    extreme = float(np.mean((w == 0) | (w == 1.0))) if w.size else 1.0
    return XdSolution(res, res.average_cost, L_pol, lam_eff, peak, extreme, policy_table(mdp, res))


def policy_table(mdp: XdMdp, res: ValueIterationResult) -> dict:
    """Map from state tuple to the chosen action code."""
    return {st: int(res.policy[i]) for i, st in enumerate(mdp.space.states)}


def export_policy(mdp: XdMdp, res: ValueIterationResult) -> str:
    """Policy as JSON records with named state fields and ``w1``."""
    recs = []
    D = mdp.params.units
    for i, st in enumerate(mdp.space.states):
        phase, q0, q1, q2, q3, s = st
        a = int(res.policy[i])
        recs.append({"interval": phase[0], "t_d": phase[1], "q0": q0, "q1": q1, "q2": q2,
                     "q3": f"{q3}/{D}", "s": s, "action": a, "w1": action_w1(a)})
    return json.dumps({"params": mdp.params.__dict__, "average_cost": res.average_cost,
                       "policy": recs}, sort_keys=True, indent=1)


__all__ = [
    "FREE", "FiniteMdp", "ValueIterationResult", "XdKernel", "XdMdp", "XdParams", "XdSolution",
    "action_w1", "build_xd_mdp", "evaluate_policy", "export_policy", "iid_new_nodes_prob",
    "policy_table", "solve_xd", "value_iteration", "xd_head_advance_prob", "xd_new_reservation_prob",
]
