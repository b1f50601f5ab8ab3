"""Dense two-phase simplex with Bland's rule, and the LP-based tools built on
it: optimal weights on a fixed support and Caratheodory-type support
reduction.

Problems are in standard form ``min c.x  s.t.  A x = b, x >= 0``.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .measures import DiscreteMeasure

__all__ = [
    "LPStatus",
    "LPStructureError",
    "LinearProgram",
    "LPSolution",
    "solve",
    "independent_rows",
    "weights_for_support",
    "tchakaloff_reduce",
    "lp_to_csv",
    "transport_lp",
    "northwest_corner",
]

RANK_TOL = 1e-10
FEAS_TOL = 1e-9
PIVOT_TOL = 1e-9
COST_TOL = 1e-9
WEIGHT_FLOOR = 1e-12
# relative singular-value cut-off for Carathéodory elimination
ELIM_TOL = 1e-13
REFACTOR_EVERY = 40
# below this many rows a fresh inverse is cheaper than tracking its drift
SMALL_BASIS = 64
# degenerate pivots tolerated before the leaving rule falls back to Bland
STALL_LIMIT = 50


class LPStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


class LPStructureError(ValueError):
    """Inconsistent dimensions or non-finite data."""


@dataclass(frozen=True)
class LinearProgram:
    """``min c.x`` subject to ``A x = b`` and ``x >= 0``."""

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).ravel()
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float).ravel()
        if A.ndim != 2 or A.shape != (b.size, c.size):
            raise LPStructureError(
                f"A has shape {A.shape}, expected ({b.size}, {c.size})")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))
                and np.all(np.isfinite(c))):
            raise LPStructureError("LP data must be finite")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)


@dataclass(frozen=True)
class LPSolution:
    status: LPStatus
    x: np.ndarray
    objective: float
    basis: tuple
    pivots: int = 0

    @property
    def optimal(self):
        return self.status is LPStatus.OPTIMAL


def independent_rows(A, tol=RANK_TOL):
    """Indices (sorted) of a maximal set of linearly independent rows,
    detected by column-pivoted QR of A^T."""
    if A.shape[0] == 0:
        return np.arange(0)
    _, R, piv = scipy.linalg.qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return np.arange(0)
    rank = int(np.sum(diag > tol * diag[0]))
    return np.sort(piv[:rank])


class _Simplex:
    """Revised simplex on an explicit basis inverse."""

    def __init__(self, A, b):
        self.A = A
        self.b = b
        self.m, self.n = A.shape
        self.pivots = 0
        self.every = 1 if self.m <= SMALL_BASIS else REFACTOR_EVERY

    def set_basis(self, basis):
        self.basis = np.array(basis, dtype=int)
        self.refactor()

    def refactor(self):
        B = self.A[:, self.basis]
        self.Binv = np.linalg.inv(B)
        self.xB = self.Binv @ self.b
        self.since = 0

    def run(self, cost, allowed):
        """Minimise ``cost`` from the current feasible basis. Returns
        ``"optimal"`` or ``"unbounded"``."""
        A = self.A
        blocked = np.zeros(self.n, dtype=bool)
        best, stall = np.inf, 0
        while True:
            obj = float(cost[self.basis] @ self.xB)
            if obj < best - COST_TOL * (1.0 + abs(best if np.isfinite(best) else obj)):
                best, stall = obj, 0
            else:
                stall += 1
            y = cost[self.basis] @ self.Binv
            d = cost - y @ A
            scale = 1.0 + np.max(np.abs(cost))
            cand = np.flatnonzero((d < -COST_TOL * scale) & allowed & ~blocked)
            if cand.size:
                in_basis = np.zeros(self.n, dtype=bool)
                in_basis[self.basis] = True
                cand = cand[~in_basis[cand]]
            if cand.size == 0:
                return "optimal"
            j = int(cand[0])  # Bland: lowest index with negative reduced cost
            u = self.Binv @ A[:, j]
            pos = u > PIVOT_TOL * max(1.0, np.max(np.abs(u)))
            if not np.any(pos):
                return "unbounded"
            r = self._leaving(u, pos, bland=stall > STALL_LIMIT)
            if self.pivot(r, j, u):
                blocked[:] = False
            else:
                blocked[j] = True

    def _leaving(self, u, pos, bland):
        xB = np.maximum(self.xB, 0.0)
        ratios = np.full(self.m, np.inf)
        ratios[pos] = xB[pos] / u[pos]
        if bland:
            tmin = ratios.min()
            ties = np.flatnonzero(ratios <= tmin + 1e-12 * (1.0 + tmin))
            return int(ties[np.argmin(self.basis[ties])])
        # Harris: bound the step with a small feasibility slack, then take
        # the largest pivot among rows that block within that bound
        slack = np.full(self.m, np.inf)
        slack[pos] = (xB[pos] + FEAS_TOL) / u[pos]
        ok = np.flatnonzero(ratios <= slack.min())
        big = u[ok] >= u[ok].max() * (1.0 - 1e-12)
        ok = ok[big]
        return int(ok[np.argmin(self.basis[ok])])

    def pivot(self, r, j, u):
        """Exchange basis position ``r`` for column ``j``. Returns False, with
        the basis untouched, if the new basis is numerically singular."""
        saved = (self.basis.copy(), self.Binv.copy(), self.xB.copy(), self.since)
        piv = u[r]
        row = self.Binv[r] / piv
        xr = self.xB[r] / piv
        self.Binv -= np.outer(u, row)
        self.Binv[r] = row
        self.xB -= u * xr
        self.xB[r] = xr
        self.basis[r] = j
        self.pivots += 1
        self.since += 1
        if self.since >= self.every:
            try:
                self.refactor()
            except np.linalg.LinAlgError:
                self.basis, self.Binv, self.xB, self.since = saved
                self.pivots -= 1
                self.refactor()
                return False
        return True


def _try_warm(A, b, basis, feas):
    basis = np.asarray(basis, dtype=int)
    m, n = A.shape
    if basis.size != m or np.unique(basis).size != m or np.any(basis < 0) \
            or np.any(basis >= n):
        return None
    B = A[:, basis]
    try:
        xB = np.linalg.solve(B, b)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(xB)) or np.any(xB < -feas) \
            or np.linalg.norm(B @ xB - b) > feas:
        return None
    return basis


def solve(lp, basis=None, warn=True, repair=None):
    """Solve a linear program with the two-phase simplex method.

    Parameters
    ----------
    lp : LinearProgram
    basis : sequence of int, optional
        Warm-start basis (column indices). Used only if it is a feasible
        basis of the row-reduced system; otherwise phase I runs as usual.
    warn : bool
        Emit a ``RuntimeWarning`` when dependent equality rows are dropped.
    repair : dict, optional
        Maps positions of ``basis`` to columns of a previous constraint
        matrix for which ``basis`` was feasible. When the warm basis is no
        longer feasible, these columns are used as artificials so phase I
        starts from the previous solution instead of from scratch.

    Returns
    -------
    LPSolution
        Deterministic for fixed input. ``basis`` lists the basic columns.

    Examples
    --------
    >>> sol = solve(LinearProgram([1.0, 1.0], [[1.0, 1.0]], [1.0]))
    >>> sol.status.value, sol.objective
    ('optimal', 1.0)
    """
    A_full, b_full, c = lp.A, lp.b, lp.c
    n = c.size
    feas = FEAS_TOL * max(1.0, np.linalg.norm(b_full))
    rows = independent_rows(A_full)
    if rows.size < A_full.shape[0] and warn:
        warnings.warn(f"dropped {A_full.shape[0] - rows.size} dependent equality "
                      "row(s)", RuntimeWarning, stacklevel=2)
    A = A_full[rows]
    b = b_full[rows].copy()
    m = A.shape[0]
    if m == 0:
        if np.linalg.norm(b_full) > feas:
            return LPSolution(LPStatus.INFEASIBLE, np.zeros(n), np.inf, ())
        if np.any(c < 0):
            return LPSolution(LPStatus.UNBOUNDED, np.zeros(n), -np.inf, ())
        return LPSolution(LPStatus.OPTIMAL, np.zeros(n), 0.0, ())
    flip = b < 0
    A = np.where(flip[:, None], -A, A)
    b = np.where(flip, -b, b)

    start = _try_warm(A, b, basis, feas) if basis is not None else None
    if start is not None:
        sx = _Simplex(A, b)
        sx.set_basis(start)
    else:
        sx = None
        if basis is not None and repair:
            # old columns stand in as artificials at their basis positions
            pos = sorted(repair)
            cols = np.column_stack([np.asarray(repair[k], dtype=float)[rows] for k in pos])
            cols = np.where(flip[:, None], -cols, cols)
            warm = np.array(basis, dtype=int)
            warm[pos] = n + np.arange(len(pos))
            sx = _phase_one(A, b, cols, warm, feas)
        if sx is None:
            sx = _phase_one(A, b, np.eye(m), n + np.arange(m), feas)
        if sx is None or sx == "infeasible":
            return LPSolution(LPStatus.INFEASIBLE, np.zeros(n), np.inf, ())
    status = sx.run(c, np.ones(n, dtype=bool))
    if status == "unbounded":
        return LPSolution(LPStatus.UNBOUNDED, np.zeros(n), -np.inf,
                          tuple(sx.basis), sx.pivots)
    x = np.zeros(n)
    xB = np.linalg.solve(A[:, sx.basis], b)
    x[sx.basis] = np.where(np.abs(xB) <= feas, np.maximum(xB, 0.0), xB)
    if np.any(x < -feas) or np.linalg.norm(A_full @ x - b_full) > feas * 10:
        return LPSolution(LPStatus.INFEASIBLE, x, np.inf, tuple(sx.basis),
                          sx.pivots)
    x = np.maximum(x, 0.0)
    return LPSolution(LPStatus.OPTIMAL, x, float(c @ x), tuple(int(k) for k in sx.basis),
                      sx.pivots)


def _phase_one(A, b, art, start, feas):
    """Phase I on ``[A | art]`` from the basis ``start``, which must be
    feasible. Returns a simplex positioned at a structural feasible basis,
    ``"infeasible"``, or None if ``start`` is not a feasible basis."""
    n, k = A.shape[1], art.shape[1]
    Aa = np.hstack([A, art])
    if _try_warm(Aa, b, start, feas) is None:
        return None
    sx = _Simplex(Aa, b)
    sx.set_basis(start)
    c1 = np.concatenate([np.zeros(n), np.ones(k)])
    sx.run(c1, np.ones(n + k, dtype=bool))
    if c1[sx.basis] @ np.maximum(sx.xB, 0.0) > feas:
        return "infeasible"
    _drive_out_artificials(sx, n)
    if np.any(sx.basis >= n):
        # A row-independent system always has a structural basis, so
        # this only happens under severe ill-conditioning.
        raise np.linalg.LinAlgError("could not build a structural basis")
    out = _Simplex(A, b)
    out.set_basis(sx.basis.copy())
    out.pivots = sx.pivots
    return out


def _drive_out_artificials(sx, n):
    for r in range(sx.m):
        if sx.basis[r] < n:
            continue
        row = sx.Binv[r] @ sx.A[:, :n]
        in_basis = np.zeros(n, dtype=bool)
        in_basis[sx.basis[sx.basis < n]] = True
        cand = np.flatnonzero((np.abs(row) > 1e-9) & ~in_basis)
        if cand.size:
            j = int(cand[np.argmax(np.abs(row[cand]) > 1e-7)])
            sx.pivot(r, j, sx.Binv @ sx.A[:, j])


# ---------------------------------------------------------------------------


def weights_for_support(support, constraints, costs, basis=None):
    """Cost-minimising probability weights on a fixed support.

    Parameters
    ----------
    support : ndarray, shape (K, D)
        Candidate points.
    constraints : sequence of (callable, ndarray)
        Each callable maps the support to a ``(K, n_i)`` matrix of test
        function values; the array holds the ``n_i`` target moments.
    costs : ndarray, shape (K,)
        Cost of each support point.
    basis : sequence of int, optional
        Warm start, see :func:`solve`.

    Returns
    -------
    LPSolution
        ``x`` holds the weights. ``Infeasible`` means no probability vector
        on this support matches the moments.
    """
    support = np.asarray(support, dtype=float)
    K = support.shape[0]
    rows = [np.ones((1, K))]
    rhs = [np.ones(1)]
    for func, target in constraints:
        V = np.asarray(func(support), dtype=float).reshape(K, -1)
        rows.append(V.T)
        rhs.append(np.asarray(target, dtype=float).ravel())
    lp = LinearProgram(np.asarray(costs, dtype=float), np.vstack(rows),
                       np.concatenate(rhs))
    return solve(lp, basis=basis, warn=False)


def _numerical_rank(M, tol=ELIM_TOL):
    if M.size == 0:
        return 0
    sv = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(sv > tol * sv[0])) if sv[0] > 0.0 else 0


def _eliminate(A, x, pool):
    """Move the weights of ``pool`` along a null vector of ``A[:, pool]``
    until one vanishes; returns the surviving pool."""
    _, _, Vt = np.linalg.svd(A[:, pool])
    v = Vt[-1]
    if v.max() <= 0.0:
        v = -v
    pos = v > 0.0
    ratios = np.where(pos, x[pool] / np.where(pos, v, 1.0), np.inf)
    k = int(np.argmin(ratios))
    x[pool] = np.maximum(x[pool] - ratios[k] * v, 0.0)
    x[pool[k]] = 0.0
    return [i for i in pool if x[i] > 0.0]


def tchakaloff_reduce(measure, lambda_eval, cost_eval=None):
    """Reduce a discrete measure to a subset of its atoms with the same
    moments.

    Carathéodory elimination: a pool of at most ``rank + 1`` atoms is kept
    and, whenever it exceeds the rank of its moment matrix, the weights move
    along a null vector until one of them reaches zero. The survivors are
    polished by a least-squares solve against the original moments.

    Parameters
    ----------
    measure : DiscreteMeasure
    lambda_eval : callable
        Maps the ``(K, D)`` points to a ``(K, N0)`` matrix of moment
        functions.
    cost_eval : callable, optional
        Maps points to costs. The cost becomes one more moment coordinate,
        so the reduced measure has the same cost.

    Returns
    -------
    DiscreteMeasure
        Supported on at most ``rank`` of the input atoms, where ``rank`` is
        the numerical rank of the moment matrix with a mass row appended;
        the input is returned unchanged when its atoms are already
        independent.
    """
    pts, w = measure.points, measure.weights
    V = np.asarray(lambda_eval(pts), dtype=float).reshape(pts.shape[0], -1)
    if cost_eval is not None:
        cost = np.asarray(cost_eval(pts), dtype=float).ravel()
        V = np.hstack([V, cost[:, None]])
    A = np.vstack([np.ones((1, V.shape[0])), V.T])
    # equilibrate rows so the rank tolerance is scale free
    A = A / np.maximum(np.max(np.abs(A), axis=1, keepdims=True), 1e-300)
    if w.size <= _numerical_rank(A):
        return measure
    b = A @ w
    x = w.copy()
    pool = []
    for i in np.flatnonzero(x > 0.0):
        pool.append(int(i))
        while len(pool) > _numerical_rank(A[:, pool]):
            pool = _eliminate(A, x, pool)
    pool = np.array(sorted(pool))
    # the pool columns are independent, so the polish is a unique solve
    y, *_ = np.linalg.lstsq(A[:, pool], b, rcond=None)
    if np.all(y > 0.0) and np.linalg.norm(A[:, pool] @ y - b) \
            <= np.linalg.norm(A[:, pool] @ x[pool] - b):
        x[pool] = y
    x = np.where(x < WEIGHT_FLOOR, 0.0, x)
    keep = np.flatnonzero(x > 0.0)
    return DiscreteMeasure(pts[keep], x[keep] / x[keep].sum())


def lp_to_csv(lp):
    """Debug dump of ``[A | b]`` with header ``a1,...,ak,b``."""
    head = ",".join([f"a{j + 1}" for j in range(lp.c.size)] + ["b"])
    lines = [head]
    for row, rhs in zip(lp.A, lp.b):
        lines.append(",".join(repr(float(v)) for v in np.append(row, rhs)))
    return "\n".join(lines) + "\n"


def transport_lp(a, b, C):
    """Discrete transport problem between mass vectors ``a`` and ``b`` with
    cost matrix ``C``; returns ``(value, plan)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n1, n2 = a.size, b.size
    A = np.vstack([np.kron(np.eye(n1), np.ones(n2)), np.kron(np.ones(n1), np.eye(n2))])
    sol = solve(LinearProgram(np.asarray(C, dtype=float).ravel(), A,
                              np.concatenate([a, b])), warn=False)
    if not sol.optimal:
        raise RuntimeError(f"transport LP is {sol.status.value}")
    return sol.objective, sol.x.reshape(n1, n2)


def northwest_corner(a, b):
    """Monotone (north-west corner) coupling of two mass vectors.

    Optimal for costs h(i - j) with h discretely convex.
    """
    a = np.asarray(a, dtype=float).copy()
    b = np.asarray(b, dtype=float).copy()
    plan = np.zeros((a.size, b.size))
    i = j = 0
    while i < a.size and j < b.size:
        t = min(a[i], b[j])
        plan[i, j] += t
        a[i] -= t
        b[j] -= t
        # advance the exhausted side; on ties advance the row first
        if a[i] <= b[j]:
            i += 1
        else:
            j += 1
    return plan
