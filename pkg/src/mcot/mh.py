"""Metropolis-Hastings search over cell configurations for the
piecewise-constant moment problem.

A configuration is a set of K distinct cells ``(i, j)`` of the N x N grid
(1-based, cell i covers ``[(i-1)/N, i/N]``). Its weights are the
cost-minimising probability vector whose row and column sums equal the cell
masses of the two marginals; its cost is the LP optimum with cell costs
``c~(i, j)``, the minimum of the transport cost over the closed cell.

The chain moves one particle to a free 4-neighbour cell, rejects moves that
make the LP infeasible and accepts the rest with probability
``min(1, exp(-(c_new - c_act)/beta) * n_act / n_new)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linprog import LinearProgram, northwest_corner, solve, transport_lp
from .measures import cell_masses
from .problem import CostFunction, StructureError
from .testfns import PiecewiseConstant

__all__ = [
    "cell_cost",
    "cell_cost_matrix",
    "CellProblem",
    "CellConfiguration",
    "MHParams",
    "MHResult",
    "free_neighbours",
    "acceptance_probability",
    "init_configuration",
    "mh_step",
    "run_mh",
    "cell_problem_optimum",
    "mh_trace_to_csv",
    "configuration_to_csv",
]

MAX_INIT_RETRIES = 50
CACHE_LIMIT = 200_000
_MOVES = ((1, 0), (-1, 0), (0, 1), (0, -1))


def cell_cost(i, j, N, cost):
    """Minimum of the cost over the closed cell ``T_i x T_j``, taken over the
    four cell corners.

    For costs increasing in ``|x - y|`` this is the closest-corner rule:
    ``c(i/N, (j-1)/N)`` if ``i < j``, ``c((i-1)/N, j/N)`` if ``i > j`` and
    zero on the diagonal.

    Examples
    --------
    >>> cell_cost(1, 3, 4, CostFunction.power(2))
    0.0625
    """
    if not (1 <= i <= N and 1 <= j <= N):
        raise IndexError(f"cell ({i}, {j}) outside the {N}x{N} grid")
    xs = np.array([i - 1, i - 1, i, i], dtype=float) / N
    ys = np.array([j - 1, j, j - 1, j], dtype=float) / N
    return float(np.min(cost.evaluate([xs[:, None], ys[:, None]])))


def cell_cost_matrix(N, cost):
    """All cell costs as an ``(N, N)`` array indexed ``[i-1, j-1]``."""
    g = np.arange(N + 1, dtype=float) / N
    X, Y = np.meshgrid(g, g, indexing="ij")
    corner = cost.evaluate([X.reshape(-1, 1), Y.reshape(-1, 1)]).reshape(N + 1, N + 1)
    return np.minimum.reduce([corner[:-1, :-1], corner[:-1, 1:],
                              corner[1:, :-1], corner[1:, 1:]])


@dataclass(frozen=True)
class CellProblem:
    """Cell masses ``a`` (rows), ``b`` (columns) and cell costs ``C``."""

    a: np.ndarray
    b: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).ravel()
        b = np.asarray(self.b, dtype=float).ravel()
        C = np.asarray(self.C, dtype=float)
        if a.size != b.size or C.shape != (a.size, a.size):
            raise StructureError("cell problem needs N row masses, N column "
                                 "masses and an N x N cost matrix")
        if np.any(a < 0) or np.any(b < 0) or abs(a.sum() - 1) > 1e-9 \
                or abs(b.sum() - 1) > 1e-9:
            raise StructureError("cell masses must be probability vectors")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "C", C)

    @property
    def N(self):
        return self.a.size

    @classmethod
    def from_marginals(cls, mu, nu, N, cost):
        return cls(cell_masses(mu, N), cell_masses(nu, N), cell_cost_matrix(N, cost))

    @classmethod
    def from_problem(cls, prob):
        """Build from a two-marginal problem with piecewise-constant families
        on [0, 1]."""
        if prob.n_marginals != 2 or prob.martingale is not None:
            raise StructureError("the cell search needs a plain two-marginal problem")
        fams = [c.family for c in prob.constraints]
        if not all(isinstance(f, PiecewiseConstant) for f in fams) \
                or fams[0].N != fams[1].N \
                or any((f.lo, f.hi) != (0.0, 1.0) for f in fams):
            raise StructureError("the cell search needs piecewise-constant "
                                 "families of equal N on [0, 1]")
        return cls(prob.constraints[0].targets, prob.constraints[1].targets,
                   cell_cost_matrix(fams[0].N, prob.cost))

    def constraint_matrix(self, cells):
        """Rows: total mass, then row sums, then column sums."""
        N, K = self.N, len(cells)
        A = np.zeros((2 * N + 1, K))
        A[0] = 1.0
        A[cells[:, 0], np.arange(K)] = 1.0
        A[N + cells[:, 1], np.arange(K)] = 1.0
        return A

    def rhs(self):
        return np.concatenate([[1.0], self.a, self.b])

    def costs(self, cells):
        return self.C[cells[:, 0] - 1, cells[:, 1] - 1]


@dataclass
class CellConfiguration:
    """K distinct cells with their LP weights.

    ``cells`` has shape (K, 2) with 1-based indices. ``basis`` is the LP
    basis used to warm-start the next solve.
    """

    problem: CellProblem
    cells: np.ndarray
    weights: np.ndarray
    cost: float
    basis: tuple = ()
    residual: float = 0.0

    @property
    def K(self):
        return self.cells.shape[0]

    def occupancy(self):
        occ = np.zeros((self.problem.N + 2, self.problem.N + 2), dtype=bool)
        occ[self.cells[:, 0], self.cells[:, 1]] = True
        return occ

    def copy(self):
        return CellConfiguration(self.problem, self.cells.copy(), self.weights.copy(),
                                 self.cost, self.basis, self.residual)


@dataclass(frozen=True)
class MHParams:
    beta: float
    iterations: int = 20_000
    seed: int = 0
    K: Optional[int] = None

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")


@dataclass
class MHResult:
    trace: np.ndarray
    best: CellConfiguration
    final: CellConfiguration
    max_residual: float
    accepted: int
    infeasible: int
    stats: dict = field(default_factory=dict)


def make_rng(seed):
    return np.random.default_rng(np.random.Philox(seed))


class _WeightSolver:
    """LP weights for a configuration, memoised on the cell set."""

    def __init__(self, problem):
        self.problem = problem
        self.b = problem.rhs()
        self.cache = {}

    def __call__(self, cells, basis=None, moved=None, old_cell=None):
        order = np.lexsort((cells[:, 1], cells[:, 0]))
        key = cells[order].tobytes()
        hit = self.cache.get(key)
        if hit is not None:
            status, w_sorted, cost, resid = hit
            w = np.empty_like(w_sorted)
            w[order] = w_sorted
            return status, w, cost, basis, resid
        p = self.problem
        A = p.constraint_matrix(cells)
        repair = None
        if basis is not None and moved in basis:
            old = p.constraint_matrix(np.asarray([old_cell]))[:, 0]
            repair = {list(basis).index(moved): old}
        sol = solve(LinearProgram(p.costs(cells), A, self.b), basis=basis,
                    warn=False, repair=repair)
        if sol.optimal:
            resid = float(np.max(np.abs(A @ sol.x - self.b)))
            out = (True, sol.x, sol.objective, sol.basis, resid)
        else:
            out = (False, np.zeros(len(cells)), np.inf, (), np.inf)
        if len(self.cache) < CACHE_LIMIT:
            self.cache[key] = (out[0], out[1][order], out[2], out[4])
        return out


def free_neighbours(occ, cell, N):
    """Free 4-neighbours of ``cell`` inside the grid, given the occupancy
    grid (padded by one on each side)."""
    i, j = int(cell[0]), int(cell[1])
    out = []
    for di, dj in _MOVES:
        u, v = i + di, j + dj
        if 1 <= u <= N and 1 <= v <= N and not occ[u, v]:
            out.append((u, v))
    return out


def acceptance_probability(c_act, c_new, n_act, n_new, beta):
    """``min(1, exp(-(c_new - c_act)/beta) * n_act / n_new)``."""
    log_r = -(c_new - c_act) / beta + np.log(n_act) - np.log(n_new)
    return 1.0 if log_r >= 0.0 else float(np.exp(log_r))


def init_configuration(problem, K, rng, shuffle=True, solver=None):
    """Feasible starting configuration.

    The monotone (north-west corner) coupling between the row masses and the
    column masses permuted by a random ``sigma`` gives at most 2N - 1 cells;
    the remaining cells are drawn uniformly among the free ones. With
    ``shuffle=False`` sigma is the identity, which is the cell-problem
    optimum for costs convex in ``i - j``.

    Raises
    ------
    RuntimeError
        If no feasible configuration is found within the retry budget.
    """
    N = problem.N
    if not 2 * N + 2 <= K <= N * N:
        raise ValueError(f"K must lie in [2N+2, N^2] = [{2 * N + 2}, {N * N}]")
    solver = solver or _WeightSolver(problem)
    for _ in range(MAX_INIT_RETRIES):
        sigma = rng.permutation(N) if shuffle else np.arange(N)
        plan = northwest_corner(problem.a, problem.b[sigma])
        r, c = np.nonzero(plan > 0.0)
        base = np.column_stack([r + 1, sigma[c] + 1])
        occ = np.zeros((N + 2, N + 2), dtype=bool)
        occ[base[:, 0], base[:, 1]] = True
        free = np.argwhere(~occ[1:N + 1, 1:N + 1]) + 1
        extra = free[rng.choice(len(free), size=K - len(base), replace=False)]
        cells = np.vstack([base, extra]).astype(int)
        ok, w, cost, basis, resid = solver(cells)
        if ok:
            return CellConfiguration(problem, cells, w, cost, basis, resid)
    raise RuntimeError("no feasible initial configuration found")


def mh_step(state, params, rng, solver=None):
    """One Metropolis-Hastings proposal.

    Returns ``(new_state, accepted, feasible)``. The state is returned
    unchanged (same object) on rejection, on an infeasible proposal and when
    no particle has a free neighbour.
    """
    problem, N = state.problem, state.problem.N
    solver = solver or _WeightSolver(problem)
    occ = state.occupancy()
    movable = [k for k in range(state.K) if free_neighbours(occ, state.cells[k], N)]
    if not movable:
        return state, False, True
    # uniform pick among particles with a free neighbour, by rejection
    while True:
        l = int(rng.integers(state.K))
        fn = free_neighbours(occ, state.cells[l], N)
        if fn:
            break
    n_act = len(fn)
    target = fn[int(rng.integers(n_act))]
    cells = state.cells.copy()
    cells[l] = target
    ok, w, cost, basis, resid = solver(cells, state.basis or None, l, state.cells[l])
    if not ok:
        return state, False, False
    occ[state.cells[l][0], state.cells[l][1]] = False
    occ[target] = True
    n_new = len(free_neighbours(occ, target, N))
    prob = acceptance_probability(state.cost, cost, n_act, n_new, params.beta)
    if rng.random() < prob:
        return CellConfiguration(problem, cells, w, cost, basis, resid), True, True
    return state, False, True


def run_mh(problem, params, shuffle=True, init=None):
    """Run the chain for ``params.iterations`` proposals.

    Parameters
    ----------
    problem : CellProblem or MCOTProblem
    params : MHParams
        ``K`` defaults to 3N + 2.
    shuffle : bool
        Start from a sigma-permuted monotone configuration.
    init : CellConfiguration, optional

    Returns
    -------
    MHResult
        ``trace`` columns: iter, cost_current, cost_best, accepted. Row 0 is
        the initial configuration.
    """
    if not isinstance(problem, CellProblem):
        problem = CellProblem.from_problem(problem)
    rng = make_rng(params.seed)
    K = params.K if params.K is not None else 3 * problem.N + 2
    solver = _WeightSolver(problem)
    state = init.copy() if init is not None else \
        init_configuration(problem, K, rng, shuffle, solver)
    best = state
    max_resid = state.residual
    rows = np.empty((params.iterations + 1, 4))
    rows[0] = (0, state.cost, state.cost, 0)
    n_acc = n_inf = 0
    for it in range(1, params.iterations + 1):
        state, acc, feas = mh_step(state, params, rng, solver)
        n_acc += acc
        n_inf += not feas
        if acc:
            max_resid = max(max_resid, state.residual)
            if state.cost < best.cost:
                best = state
        rows[it] = (it, state.cost, best.cost, float(acc))
    return MHResult(rows, best.copy(), state.copy(), max_resid, n_acc, n_inf,
                    {"cache_entries": len(solver.cache)})


def cell_problem_optimum(problem):
    """Exact optimum of the full cell problem (all N^2 cells).

    Returns ``(lp_value, monotone_value)``: the transport LP optimum and the
    cost of the north-west corner coupling. The two agree when the cell
    costs are discretely convex in ``i - j``.
    """
    lp_value, _ = transport_lp(problem.a, problem.b, problem.C)
    nw = northwest_corner(problem.a, problem.b)
    return lp_value, float(np.sum(nw * problem.C))


def mh_trace_to_csv(trace):
    lines = ["iter,cost_current,cost_best,accepted"]
    for it, cur, best, acc in trace:
        lines.append(f"{int(it)},{cur!r},{best!r},{int(acc)}")
    return "\n".join(lines) + "\n"


def configuration_to_csv(config):
    lines = ["w,i,j"]
    for w, (i, j) in zip(config.weights, config.cells):
        lines.append(f"{float(w)!r},{int(i)},{int(j)}")
    return "\n".join(lines) + "\n"
