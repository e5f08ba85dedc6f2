"""Collision-resolution algorithms as matrix families.

A collision-resolution algorithm (CRA) is described by three kinds of
matrices over its procedure states:

* ``X0``: transitions in a contention slot that delivers nothing,
* ``X1``: transitions in a contention slot with exactly one success,
* ``Y(n)``: start-of-slot transitions that open a new collision-resolution
  period (CRP) when ``n`` signals are queued.

``X0 + X1`` is row-stochastic, and so is every ``Y(n)``.

Tree-splitting states are tuples ``(m0, ..., mR)``.  ``m_k`` counts the
packets that are still unresolved at layer ``k`` or deeper, and ``-1`` marks
an inactive layer.  The active layer ``x`` is the deepest layer that is not
``-1``.  Its ``m_x`` packets are the ones transmitting in the current slot.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .core import TableSpace
from .errors import InvalidParameterError

TreeSplitState = tuple  # (m0, ..., mR)

IDLE, SUCCESS, COLLISION, NONE = "idle", "success", "collision", "none"


def active_layer(m: TreeSplitState) -> int:
    """Deepest layer with ``m_x != -1``; ``-1`` when no CRP is running."""
    x = -1
    for k, v in enumerate(m):
        if v == -1:
            break
        x = k
    return x


def tree_outcomes(m: TreeSplitState, R: int) -> list[tuple[float, TreeSplitState, str]]:
    """One contention slot of tree splitting from state ``m``.

    Returns ``(probability, next_state, event)`` triples with ``event`` one of
    ``idle``, ``success``, ``collision`` (or ``none`` when no CRP is active).
    """
    x = active_layer(m)
    if x < 0:
        return [(1.0, m, NONE)]
    mx = m[x]
    cur = list(m)
    if mx == 0:
        cur[x] = -1
        return [(1.0, tuple(cur), IDLE)]
    if mx == 1:
        for k in range(x, R + 1):
            cur[k] = -1
        for k in range(x):
            cur[k] -= 1
        return [(1.0, tuple(cur), SUCCESS)]
    if x == R:
        for k in range(x):
            cur[k] -= mx
        cur[x] = -1
        return [(1.0, tuple(cur), COLLISION)]
    out = []
    scale = 2.0 ** -mx
    for k in range(mx + 1):
        nxt = list(m)
        nxt[x + 1] = k
        out.append((math.comb(mx, k) * scale, tuple(nxt), COLLISION))
    return out


def tree_states(N: int, R: int) -> list[TreeSplitState]:
    """All non-increasing ``(m0..mR)`` over ``{-1..N}``, in lexicographic order."""
    vals = range(-1, N + 1)
    out = [s for s in itertools.product(vals, repeat=R + 1)
           if all(s[i] >= s[i + 1] for i in range(R))]
    return sorted(out)


@dataclass
class CraSpec:
    """A CRA as the matrix family ``(X0, X1, Y)``.

    Attributes
    ----------
    states : TableSpace
        Procedure states, index order defines matrix rows.
    X0, X1 : scipy.sparse.csr_matrix
    kind : str
        ``"tree"`` or ``"aloha"``.
    n_max : int
        Largest queue length ``n`` for which ``Y(n)`` is defined.
    memoryless : bool
        True when the procedure state carries no information beyond the
        reservation-queue length.
    """

    states: TableSpace
    X0: sp.csr_matrix
    X1: sp.csr_matrix
    y_builder: Callable[[int], sp.csr_matrix]
    kind: str
    n_max: int
    params: dict = field(default_factory=dict)
    memoryless: bool = False
    _y_cache: dict = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return self.states.size

    def Y(self, n: int) -> sp.csr_matrix:
        if not 0 <= n <= self.n_max:
            raise InvalidParameterError(f"Y(n) defined for 0 <= n <= {self.n_max}, got {n}")
        if n not in self._y_cache:
            self._y_cache[n] = self.y_builder(n).tocsr()
        return self._y_cache[n]

    @property
    def idle_index(self) -> int:
        """Procedure state meaning "no CRP running"."""
        return self.params["idle_index"]


def _csr(rows, cols, vals, n):
    return sp.csr_matrix((np.asarray(vals, float), (np.asarray(rows, int), np.asarray(cols, int))),
                         shape=(n, n))


def tree_splitting_cra(N: int, R: int) -> CraSpec:
    """Tree splitting with at most ``N`` packets per CRP and ``R`` split layers."""
    if N < 1 or R < 1:
        raise InvalidParameterError(f"tree splitting needs N >= 1 and R >= 1, got N={N}, R={R}")
    space = TableSpace(tree_states(N, R))
    n = space.size
    r0, c0, v0, r1, c1, v1 = [], [], [], [], [], []
    for i, m in enumerate(space.states):
        for p, nxt, ev in tree_outcomes(m, R):
            j = space.encode(nxt)
            if ev == SUCCESS:
                r1.append(i); c1.append(j); v1.append(p)
            else:
                r0.append(i); c0.append(j); v0.append(p)
    idle = tuple([-1] * (R + 1))

    def build_y(k):
        start = space.encode((min(k, N),) + idle[1:])
        rows = np.arange(n)
        cols = np.array([start if m[0] == -1 else i for i, m in enumerate(space.states)])
        return _csr(rows, cols, np.ones(n), n)

    return CraSpec(space, _csr(r0, c0, v0, n), _csr(r1, c1, v1, n), build_y, "tree", N,
                   params={"N": N, "R": R, "idle_index": space.encode(idle)})


def aloha_gamma(queue_len: int) -> float:
    """Success probability of queue-aware Aloha with ``i`` contenders sending w.p. ``1/i``."""
    if queue_len <= 0:
        return 0.0
    if queue_len == 1:
        return 1.0
    i = queue_len
    return (1.0 - 1.0 / i) ** (i - 1)


def aloha_cra(n_max: int) -> CraSpec:
    """Queue-aware Aloha; the procedure state is the reservation-queue length."""
    if n_max < 0:
        raise InvalidParameterError(f"n_max must be >= 0, got {n_max}")
    n = n_max + 1
    space = TableSpace(range(n))
    g = np.array([aloha_gamma(i) for i in range(n)])
    idx = np.arange(n)
    X0 = _csr(idx, idx, 1.0 - g, n)
    X1 = _csr(idx[1:], idx[1:] - 1, g[1:], n)

    def build_y(k):
        return _csr(idx, np.full(n, k), np.ones(n), n)

    return CraSpec(space, X0, X1, build_y, "aloha", n_max, params={"idle_index": 0},
                   memoryless=True)


@dataclass(frozen=True)
class CraValidationReport:
    ok: bool
    matrix: str | None = None
    row: int | None = None
    value: float | None = None
    message: str = "ok"

    def __bool__(self):
        return self.ok


def _first_bad_row(mat, tol):
    mat = sp.csr_matrix(mat)
    data = mat.data
    bad = np.flatnonzero((data < -1e-15) | (data > 1 + 1e-12))
    if bad.size:
        row = int(np.searchsorted(mat.indptr, bad[0], side="right") - 1)
        return row, float(data[bad[0]]), "entry outside [0, 1]"
    sums = np.asarray(mat.sum(axis=1)).ravel()
    err = np.abs(sums - 1.0)
    rows = np.flatnonzero(err > tol)
    if rows.size:
        return int(rows[0]), float(sums[rows[0]]), "row does not sum to 1"
    return None


def validate_cra(spec: CraSpec, tol: float = 1e-12) -> CraValidationReport:
    """Check row by row that ``X0 + X1`` and every ``Y(n)`` are stochastic."""
    for name, mat in (("X0", spec.X0), ("X1", spec.X1)):
        m = sp.csr_matrix(mat)
        if m.data.size and (m.data.min() < -1e-15 or m.data.max() > 1 + 1e-12):
            row, val, msg = _first_bad_row(m, np.inf)
            return CraValidationReport(False, name, row, val, f"{name} row {row}: {msg}")
    hit = _first_bad_row(sp.csr_matrix(spec.X0) + sp.csr_matrix(spec.X1), tol)
    if hit:
        row, val, msg = hit
        return CraValidationReport(False, "X0+X1", row, val, f"X0+X1 row {row}: {msg} ({val!r})")
    for k in range(spec.n_max + 1):
        hit = _first_bad_row(spec.Y(k), tol)
        if hit:
            row, val, msg = hit
            return CraValidationReport(False, f"Y{k}", row, val, f"Y{k} row {row}: {msg} ({val!r})")
    return CraValidationReport(True)


def expected_crp_length(spec: CraSpec, n: int) -> float:
    """Mean number of contention slots until a CRP opened with ``n`` packets ends."""
    idle = spec.idle_index
    start = int(spec.Y(n)[idle].indices[0])
    if start == idle:
        return 0.0
    T = (sp.csr_matrix(spec.X0) + sp.csr_matrix(spec.X1)).tolil()
    keep = np.array([i for i in range(spec.size) if i != idle])
    Q = T.tocsr()[keep][:, keep].toarray()
    t = np.linalg.solve(np.eye(len(keep)) - Q, np.ones(len(keep)))
    return float(t[int(np.searchsorted(keep, start))])


__all__ = [
    "CraSpec", "CraValidationReport", "TreeSplitState", "active_layer", "aloha_cra", "aloha_gamma",
    "expected_crp_length", "tree_outcomes", "tree_splitting_cra", "tree_states", "validate_cra",
]
