"""Shared numerical substrate.

Poisson arrival probabilities, state-space indexing, row-stochastic sparse
matrices and the steady-state solver used by every analytic model in the
package.
"""
from __future__ import annotations

import bisect
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from .errors import (
    ConvergenceError,
    InvalidParameterError,
    ModelConstructionError,
    ReducibleChainError,
)

ROW_SUM_TOL = 1e-12
STEADY_TOL = 1e-10
DENSE_LIMIT = 5000
POWER_DAMPING = 0.99
POWER_MAX_ITER = 1_000_000


# --------------------------------------------------------------------------
# arrivals
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ArrivalModel:
    """Poisson arrivals: ``lambda_total`` packets per slot over ``num_nodes`` nodes."""

    lambda_total: float
    num_nodes: int = 1

    def __post_init__(self):
        if not (self.lambda_total >= 0 and math.isfinite(self.lambda_total)):
            raise InvalidParameterError(f"arrival rate must be finite and >= 0, got {self.lambda_total}")
        if int(self.num_nodes) != self.num_nodes or self.num_nodes < 1:
            raise InvalidParameterError(f"num_nodes must be a positive integer, got {self.num_nodes}")

    @property
    def per_node_rate(self) -> float:
        return self.lambda_total / self.num_nodes

    @property
    def busy_probability(self) -> float:
        """Probability that a given node sees at least one arrival in a slot."""
        return -math.expm1(-self.per_node_rate)


def _check_rate(rate):
    if not math.isfinite(rate) or rate < 0:
        raise InvalidParameterError(f"Poisson rate must be finite and >= 0, got {rate}")


def poisson_pmf(rate: float, count: int) -> float:
    """P[Poisson(rate) = count]."""
    _check_rate(rate)
    if count < 0:
        return 0.0
    if rate == 0:
        return 1.0 if count == 0 else 0.0
    return math.exp(count * math.log(rate) - rate - math.lgamma(count + 1))


def poisson_pmf_vector(rate: float, upto: int) -> np.ndarray:
    """``[pmf(0), ..., pmf(upto)]``."""
    _check_rate(rate)
    k = np.arange(upto + 1)
    if rate == 0:
        out = np.zeros(upto + 1)
        out[0] = 1.0
        return out
    return np.exp(k * math.log(rate) - rate - np.array([math.lgamma(i + 1) for i in k]))


def poisson_tail(rate: float, start: int) -> float:
    """P[Poisson(rate) >= start], computed as the complement of the finite head."""
    _check_rate(rate)
    if start <= 0:
        return 1.0
    head = math.fsum(poisson_pmf(rate, i) for i in range(start))
    return max(0.0, 1.0 - head)


def truncated_poisson(rate: float, cap: int) -> np.ndarray:
    """pmf of ``min(Poisson(rate), cap)``; the last entry holds the whole tail."""
    p = poisson_pmf_vector(rate, cap)
    p[cap] = poisson_tail(rate, cap)
    return p


def poisson_cutoff(rate: float, tol: float = 1e-15) -> int:
    """Smallest ``y`` with P[Poisson(rate) >= y] < tol."""
    y = 0
    while poisson_tail(rate, y) >= tol:
        y += 1
    return y


# --------------------------------------------------------------------------
# state spaces
# --------------------------------------------------------------------------

class StateSpace:
    """Bijection between structured state tuples and dense indices."""

    size: int

    def encode(self, state) -> int:
        raise NotImplementedError

    def decode(self, index: int):
        raise NotImplementedError

    def __len__(self):
        return self.size

    def __iter__(self):
        for i in range(self.size):
            yield self.decode(i)

    def __contains__(self, state):
        try:
            self.encode(state)
        except KeyError:
            return False
        return True


class MixedRadixSpace(StateSpace):
    """Lexicographic product space.

    ``ranges`` holds one ``(low, high)`` pair (inclusive) per tuple component.
    """

    def __init__(self, ranges: Sequence[tuple[int, int]], names: Sequence[str] | None = None):
        self.ranges = [(int(lo), int(hi)) for lo, hi in ranges]
        for lo, hi in self.ranges:
            if hi < lo:
                raise InvalidParameterError(f"empty component range ({lo}, {hi})")
        self.names = tuple(names) if names is not None else None
        self.radices = [hi - lo + 1 for lo, hi in self.ranges]
        self.size = int(np.prod(self.radices, dtype=object))
        strides = []
        acc = 1
        for r in reversed(self.radices):
            strides.append(acc)
            acc *= r
        self.strides = list(reversed(strides))

    def encode(self, state) -> int:
        idx = 0
        for v, (lo, hi), st in zip(state, self.ranges, self.strides):
            if not lo <= v <= hi:
                raise KeyError(state)
            idx += (v - lo) * st
        return idx

    def decode(self, index: int):
        if not 0 <= index < self.size:
            raise KeyError(index)
        out = []
        for (lo, _), st, r in zip(self.ranges, self.strides, self.radices):
            out.append(lo + (index // st) % r)
        return tuple(out)


class TableSpace(StateSpace):
    """Irregular state set enumerated once and stored sorted."""

    def __init__(self, states: Iterable[Hashable]):
        self.states = sorted(set(states))
        self.size = len(self.states)
        self._index = {s: i for i, s in enumerate(self.states)}

    def encode(self, state) -> int:
        return self._index[state]

    def decode(self, index: int):
        return self.states[index]


def enumerate_reachable(start, successors: Callable[[Hashable], Iterable[Hashable]], limit: int | None = None):
    """Breadth-first closure of ``start`` under ``successors``."""
    seen = {start}
    frontier = [start]
    while frontier:
        nxt = []
        for s in frontier:
            for t in successors(s):
                if t not in seen:
                    seen.add(t)
                    nxt.append(t)
                    if limit is not None and len(seen) > limit:
                        from .errors import StateSpaceTooLargeError
                        raise StateSpaceTooLargeError(f"reachable set exceeds {limit} states")
        frontier = nxt
    return seen


# --------------------------------------------------------------------------
# sparse stochastic matrices
# --------------------------------------------------------------------------

class SparseStochasticMatrix:
    """Row-compressed transition matrix with a validated stochasticity invariant."""

    def __init__(self, matrix, *, validate: bool = True, tol: float = ROW_SUM_TOL):
        csr = sp.csr_matrix(matrix, dtype=float)
        if csr.shape[0] != csr.shape[1]:
            raise ModelConstructionError(f"transition matrix must be square, got {csr.shape}")
        csr.sum_duplicates()
        csr.eliminate_zeros()
        self.csr = csr
        if validate:
            self.validate(tol)

    @classmethod
    def from_triplets(cls, rows, cols, vals, dimension: int, **kw):
        m = sp.coo_matrix((np.asarray(vals, float), (np.asarray(rows), np.asarray(cols))),
                          shape=(dimension, dimension))
        return cls(m.tocsr(), **kw)

    @property
    def dimension(self) -> int:
        return self.csr.shape[0]

    @property
    def nnz(self) -> int:
        return self.csr.nnz

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.csr.sum(axis=1)).ravel()

    def max_row_error(self) -> float:
        if self.dimension == 0:
            return 0.0
        return float(np.max(np.abs(self.row_sums() - 1.0)))

    def row(self, i: int) -> list[tuple[int, float]]:
        a, b = self.csr.indptr[i], self.csr.indptr[i + 1]
        return list(zip(self.csr.indices[a:b].tolist(), self.csr.data[a:b].tolist()))

    def validate(self, tol: float = ROW_SUM_TOL):
        data = self.csr.data
        if data.size and (data.min() < -1e-15 or data.max() > 1 + 1e-12):
            bad = int(np.argmax((data < -1e-15) | (data > 1 + 1e-12)))
            row = int(np.searchsorted(self.csr.indptr, bad, side="right") - 1)
            raise ModelConstructionError(f"row {row} holds an entry outside [0, 1]: {data[bad]!r}")
        err = np.abs(self.row_sums() - 1.0)
        if err.size and err.max() > tol:
            row = int(np.argmax(err))
            raise ModelConstructionError(
                f"row {row} sums to {1.0 + (self.row_sums()[row] - 1.0)!r}, not 1 (tol {tol:g})")

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()


@dataclass
class SteadyState:
    probabilities: np.ndarray
    residual: float
    method: str
    iterations: int = 0

    def __len__(self):
        return len(self.probabilities)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.probabilities, dtype=dtype)


def closed_class_count(P: SparseStochasticMatrix) -> int:
    """Number of closed communicating classes of the chain."""
    csr = P.csr
    ncomp, labels = connected_components(csr, directed=True, connection="strong")
    if ncomp == 1:
        return 1
    coo = csr.tocoo()
    leaves = np.zeros(ncomp, dtype=bool)
    mask = labels[coo.row] != labels[coo.col]
    leaves[labels[coo.row[mask]]] = True
    return int(np.count_nonzero(~leaves))


def _residual(pi, csr):
    return float(np.max(np.abs(csr.T @ pi - pi))) if pi.size else 0.0


def _polish(pi):
    pi = np.where(pi < 0, 0.0, pi)
    return pi / pi.sum()


def _solve_dense(csr):
    n = csr.shape[0]
    # pi (P - I + 1 1^T) = 1^T
    A = csr.toarray() - np.eye(n) + 1.0
    try:
        pi = np.linalg.solve(A.T, np.ones(n))
    except np.linalg.LinAlgError as exc:
        raise ReducibleChainError("steady-state system is singular; chain has several closed classes") from exc
    return pi


def _solve_sparse(csr):
    n = csr.shape[0]
    A = (csr.T - sp.identity(n, format="csr")).tolil()
    A[n - 1, :] = np.ones(n)
    b = np.zeros(n)
    b[n - 1] = 1.0
    return spla.spsolve(A.tocsc(), b)


def _power(csr, pi0, tol, max_iter, damping):
    PT = csr.T.tocsr()
    pi = pi0.copy()
    res = math.inf
    for it in range(1, max_iter + 1):
        nxt = damping * (PT @ pi) + (1.0 - damping) * pi
        nxt /= nxt.sum()
        if it % 10 == 0 or it == max_iter:
            res = _residual(nxt, csr)
            if res <= tol * 0.1:
                return nxt, it, res
        pi = nxt
    raise ConvergenceError(f"power iteration did not reach residual {tol:g} in {max_iter} iterations",
                           residual=res, iterations=max_iter)


def solve_steady_state(P: SparseStochasticMatrix, *, method: str = "auto", tol: float = STEADY_TOL,
                       max_iter: int = POWER_MAX_ITER, damping: float = POWER_DAMPING,
                       check_classes: bool = True) -> SteadyState:
    """Stationary distribution of a row-stochastic chain with one closed class.

    Parameters
    ----------
    P : SparseStochasticMatrix
    method : {"auto", "dense", "sparse", "power"}
        ``auto`` uses a dense solve of ``pi (P - I + 11^T) = 1^T`` up to
        ``DENSE_LIMIT`` states and a sparse LU solve above it.  ``power`` is a
        damped power iteration (``pi <- d pi P + (1 - d) pi``).
    tol : float
        Required bound on ``||pi P - pi||_inf``.

    Raises
    ------
    ReducibleChainError
        The chain has more than one closed communicating class.
    ConvergenceError
        The residual bound could not be met.
    """
    csr = P.csr
    n = csr.shape[0]
    if n == 0:
        raise ModelConstructionError("empty chain")
    if check_classes and closed_class_count(P) != 1:
        raise ReducibleChainError("chain has more than one closed communicating class")
    if method == "auto":
        method = "dense" if n <= DENSE_LIMIT else "sparse"
    iters = 0
    if method == "dense":
        pi = _polish(_solve_dense(csr))
    elif method == "sparse":
        pi = _polish(_solve_sparse(csr))
    elif method == "power":
        pi, iters, _ = _power(csr, np.full(n, 1.0 / n), tol, max_iter, damping)
        pi = _polish(pi)
    else:
        raise InvalidParameterError(f"unknown steady-state method {method!r}")
    res = _residual(pi, csr)
    if res > tol:
        # a few damped sweeps usually remove LU round-off
        try:
            pi, extra, res = _power(csr, pi, tol, max(1000, min(max_iter, 100_000)), damping)
            iters += extra
            pi = _polish(pi)
            res = _residual(pi, csr)
        except ConvergenceError as exc:
            raise ConvergenceError(f"steady-state residual {exc.residual:.3g} exceeds {tol:g}",
                                   residual=exc.residual, iterations=exc.iterations) from exc
    return SteadyState(pi, res, method, iters)


def expectation(pi, f) -> float:
    """``sum_i pi_i f(i)``; ``f`` may be a callable over indices or a vector."""
    p = np.asarray(pi, dtype=float)
    if callable(f):
        vals = np.fromiter((f(i) for i in range(p.size)), dtype=float, count=p.size)
    else:
        vals = np.asarray(f, dtype=float)
        if vals.ndim == 0:
            vals = np.full(p.size, float(vals))
    return float(p @ vals)


def trigger_stage_peak_aoii(num_nodes: int, threshold: int, lam: float) -> float:
    """Mean extra wait for packet combining when a reservation needs ``threshold`` packets."""
    if threshold < 1:
        raise InvalidParameterError("trigger threshold K must be >= 1")
    if not lam > 0:
        raise InvalidParameterError("arrival rate must be positive for the trigger-stage wait")
    return num_nodes * (threshold - 1) / (2.0 * lam)


def product_states(*ranges):
    """Convenience iterator over a lexicographic product of inclusive ranges."""
    return itertools.product(*(range(lo, hi + 1) for lo, hi in ranges))


__all__ = [
    "ArrivalModel", "MixedRadixSpace", "SparseStochasticMatrix", "StateSpace", "SteadyState",
    "TableSpace", "closed_class_count", "enumerate_reachable", "expectation", "poisson_cutoff",
    "poisson_pmf", "poisson_pmf_vector", "poisson_tail", "solve_steady_state",
    "trigger_stage_peak_aoii", "truncated_poisson",
]
