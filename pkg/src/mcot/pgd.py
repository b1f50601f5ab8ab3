"""Penalised objective over weighted particles and its alternated projected
gradient minimiser.

The state holds K particles (one coordinate block per marginal) and softmax
logits ``a`` for their weights ``p = softmax(a)``. The objective is

    F = sum_k p_k c(z_k) + (1/eta) * (sum of squared moment residuals)

where the residuals include martingale rows when the problem has them.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .measures import DiscreteMeasure
from .problem import constraint_values, martingale_values, residuals
from .testfns import UnsupportedOperationError

__all__ = [
    "ParticleState",
    "PGDParams",
    "PGDResult",
    "penalized_objective",
    "objective_terms",
    "gradient",
    "pgd_run",
    "random_state",
    "transport_map_summary",
    "trace_to_csv",
    "state_to_csv",
]


def softmax(a):
    e = np.exp(a - np.max(a))
    return e / e.sum()


@dataclass
class ParticleState:
    """Particle positions (K, D) and weight logits (K,)."""

    positions: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=float)
        if self.positions.ndim == 1:
            self.positions = self.positions[:, None]
        self.logits = np.array(self.logits, dtype=float).ravel()
        if self.logits.size != self.positions.shape[0]:
            raise ValueError("one logit per particle is required")

    @property
    def weights(self):
        return softmax(self.logits)

    @property
    def size(self):
        return self.logits.size

    def to_measure(self):
        return DiscreteMeasure(self.positions, self.weights)

    def copy(self):
        return ParticleState(self.positions.copy(), self.logits.copy())


@dataclass(frozen=True)
class PGDParams:
    """Solver settings.

    Attributes
    ----------
    eta_inv : float
        Penalty coefficient 1/eta.
    max_iter : int
        Cap on outer iterations (one a-step plus one step per marginal).
    tol : float
        Stop when the projected gradient has infinity norm below ``tol``.
    armijo_c1, backtrack, initial_step, min_step : float
        Armijo sufficient-decrease constant, step reduction factor, first
        trial step and smallest admissible step of the line search.
    seed : int
        Seed for the random initial state.
    """

    eta_inv: float
    max_iter: int = 50000
    tol: float = 1e-6
    armijo_c1: float = 1e-4
    backtrack: float = 0.5
    initial_step: float = 1.0
    min_step: float = 1e-12
    seed: int = 0

    def __post_init__(self):
        if not self.eta_inv > 0.0:
            raise ValueError("eta_inv must be positive")


@dataclass
class PGDResult:
    state: ParticleState
    trace: np.ndarray
    converged: bool
    iterations: int
    message: str = ""
    residual: object = field(default=None, repr=False)


# ---------------------------------------------------------------------------


def _targets(prob):
    if prob.symmetric:
        return [prob.constraints[0].targets]
    return [c.targets for c in prob.constraints]


def objective_terms(prob, state, eta_inv):
    """Return ``(F, cost, penalty)`` for a state."""
    parts = prob.split(state.positions)
    p = state.weights
    c = prob.cost.evaluate(parts)
    cost = float(np.dot(p, c)) if np.all(np.isfinite(c)) else np.inf
    pen = 0.0
    for V, t in zip(constraint_values(prob, parts), _targets(prob)):
        r = p @ V - t
        pen += float(r @ r)
    if prob.martingale is not None:
        t = p @ martingale_values(prob, parts)
        pen += float(t @ t)
    pen *= eta_inv
    return cost + pen, cost, pen


def penalized_objective(prob, state, eta_inv):
    """The penalised functional F."""
    return objective_terms(prob, state, eta_inv)[0]


def _check_differentiable(prob):
    for c in prob.constraints:
        if not c.family.differentiable:
            raise UnsupportedOperationError(
                f"gradient needs C^1 test functions, got {c.family.name}")
    if not prob.cost.differentiable:
        raise UnsupportedOperationError("cost has no gradient")


def gradient(prob, state, eta_inv):
    """Gradient of F.

    Returns
    -------
    grad_positions : ndarray, shape (K, D)
    grad_logits : ndarray, shape (K,)
    """
    _check_differentiable(prob)
    parts = prob.split(state.positions)
    p = state.weights
    K = p.size
    c = prob.cost.evaluate(parts)
    cgrad = prob.cost.gradient(parts)
    mats = constraint_values(prob, parts)
    res = [p @ V - t for V, t in zip(mats, _targets(prob))]
    g = c.copy()
    for V, r in zip(mats, res):
        g += 2.0 * eta_inv * (V @ r)
    blocks = []
    M = prob.n_marginals
    for i, (con, q) in enumerate(zip(prob.constraints, parts)):
        fam = con.family
        r = res[0] if prob.symmetric else res[i]
        scale = 1.0 / M if prob.symmetric else 1.0
        D = fam.derivatives(q if fam.dim > 1 else q[:, 0])
        if fam.dim == 1:
            pen = (D @ r)[:, None]
        else:
            pen = np.einsum("knd,n->kd", D, r)
        blocks.append(cgrad[i] + 2.0 * eta_inv * scale * pen)
    if prob.martingale is not None:
        mg = prob.martingale
        x = parts[mg.source][:, 0]
        y = parts[mg.target][:, 0]
        chi = mg.family.values(x)
        dchi = mg.family.derivatives(x)
        Mg = chi * (y - x)[:, None]
        t = p @ Mg
        g += 2.0 * eta_inv * (Mg @ t)
        blocks[mg.source][:, 0] += 2.0 * eta_inv * ((dchi * (y - x)[:, None] - chi) @ t)
        blocks[mg.target][:, 0] += 2.0 * eta_inv * (chi @ t)
    gpos = np.hstack(blocks) * p[:, None]
    glog = p * (g - np.dot(p, g))
    return gpos.reshape(K, -1), glog


# ---------------------------------------------------------------------------


def random_state(prob, K=None, seed=0):
    """Positions uniform in the domain box, zero logits."""
    K = prob.support_cap if K is None else int(K)
    rng = np.random.default_rng(np.random.Philox(seed))
    lo, hi = prob.boxes()
    pos = lo + (hi - lo) * rng.random((K, lo.size))
    return ParticleState(pos, np.zeros(K))


def _projected_grad_norm(prob, state, gpos, glog):
    lo, hi = prob.boxes()
    z = state.positions
    pg = z - np.clip(z - gpos, lo, hi)
    return float(max(np.max(np.abs(pg)), np.max(np.abs(glog))))


class _Evaluator:
    """Objective with cached per-block test-function values, so a line
    search on one block re-evaluates only that block."""

    def __init__(self, prob, eta_inv):
        self.prob = prob
        self.eta_inv = eta_inv
        self.targets = _targets(prob)
        self.slices = prob.slices()

    def block_values(self, k, q):
        con = self.prob.constraints[k]
        return con.family.values(q if con.dim > 1 else q[:, 0])

    def load(self, state):
        self.state = state
        self.p = state.weights
        self.parts = self.prob.split(state.positions)
        self.V = [self.block_values(k, q) for k, q in enumerate(self.parts)]

    def commit(self, state, block, V_block):
        """Adopt an accepted trial state, reusing the block values computed
        during the line search."""
        self.state = state
        self.p = state.weights
        if block is not None:
            self.parts = self.prob.split(state.positions)
            self.V[block] = V_block

    def block_gradient(self, block):
        """Gradient of F restricted to the logits (``block is None``) or to
        the coordinates of one marginal, from cached values."""
        prob, p, parts, eta_inv = self.prob, self.p, self.parts, self.eta_inv
        mats = [sum(self.V) / len(self.V)] if prob.symmetric else self.V
        res = [p @ Vm - t for Vm, t in zip(mats, self.targets)]
        mg = prob.martingale
        if mg is not None:
            x = parts[mg.source][:, 0]
            y = parts[mg.target][:, 0]
            chi = mg.family.values(x)
            t = p @ (chi * (y - x)[:, None])
        if block is None:
            g = prob.cost.evaluate(parts).copy()
            for Vm, r in zip(mats, res):
                g += 2.0 * eta_inv * (Vm @ r)
            if mg is not None:
                g += 2.0 * eta_inv * ((chi * (y - x)[:, None]) @ t)
            return p * (g - np.dot(p, g))
        con = prob.constraints[block]
        q = parts[block]
        r = res[0] if prob.symmetric else res[block]
        scale = 1.0 / prob.n_marginals if prob.symmetric else 1.0
        D = con.family.derivatives(q if con.dim > 1 else q[:, 0])
        pen = (D @ r)[:, None] if con.dim == 1 else np.einsum("knd,n->kd", D, r)
        gb = prob.cost.gradient(parts)[block] + 2.0 * eta_inv * scale * pen
        if mg is not None:
            if block == mg.source:
                dchi = mg.family.derivatives(x)
                gb[:, 0] += 2.0 * eta_inv * ((dchi * (y - x)[:, None] - chi) @ t)
            if block == mg.target:
                gb[:, 0] += 2.0 * eta_inv * (chi @ t)
        return gb * p[:, None]

    def _F(self, p, parts, V):
        prob = self.prob
        c = prob.cost.evaluate(parts)
        if not np.all(np.isfinite(c)):
            return np.inf
        F = float(np.dot(p, c))
        mats = [sum(V) / len(V)] if prob.symmetric else V
        pen = 0.0
        for Vm, t in zip(mats, self.targets):
            r = p @ Vm - t
            pen += float(r @ r)
        if prob.martingale is not None:
            t = p @ martingale_values(prob, parts)
            pen += float(t @ t)
        return F + self.eta_inv * pen

    def F_logits(self, a):
        return self._F(softmax(a), self.parts, self.V)

    def F_block(self, p, k, q):
        parts = list(self.parts)
        parts[k] = q
        V = list(self.V)
        V[k] = self.block_values(k, q)
        self.last_V = V[k]
        return self._F(p, parts, V)


def _line_search(ev, state, block, F0, g, params, lo, hi, step):
    """Projected Armijo backtracking along ``-g`` on one block.

    Returns (new_state, new_F, status, step) where status is "moved",
    "still" (projected step is zero) or "failed".
    """
    p = state.weights
    if block is not None:
        sl = ev.slices[block]
        cur = state.positions[:, sl]
    while step >= params.min_step:
        if block is None:
            new = state.logits - step * g
            d = new - state.logits
        else:
            new = np.clip(cur - step * g, lo[sl], hi[sl])
            d = new - cur
        slope = float(np.sum(g * d))
        if slope == 0.0:
            return state, F0, "still", step
        if block is None:
            F1 = ev.F_logits(new)
        else:
            F1 = ev.F_block(p, block, new)
        if F1 <= F0 + params.armijo_c1 * slope:
            trial = state.copy()
            if block is None:
                trial.logits = new
            else:
                trial.positions[:, sl] = new
            return trial, F1, "moved", step
        step *= params.backtrack
    return state, F0, "failed", step


def pgd_run(prob, params, init=None, K=None, callback=None):
    """Alternated projected gradient descent on the penalised functional.

    Each outer iteration performs an Armijo step on the logits, then on the
    coordinates of each marginal in turn. The first trial step of a block is
    ``min(initial_step, 4 * previous accepted step)`` for that block.

    Parameters
    ----------
    prob : MCOTProblem
    params : PGDParams
    init : ParticleState, optional
        Initial state; seeded uniform positions with zero logits otherwise.
    K : int, optional
        Number of particles for the random start (default: support cap).
    callback : callable, optional
        Called as ``callback(iteration, state, F)`` after every iteration.

    Returns
    -------
    PGDResult
        ``trace`` has columns iter, F, cost, penalty, grad_norm. The run
        stops when the projected gradient falls below ``params.tol``, when
        the iteration cap is hit, or when a line search fails on every block
        (``converged`` is then False).
    """
    _check_differentiable(prob)
    state = random_state(prob, K, params.seed) if init is None else init.copy()
    lo, hi = prob.boxes()
    state.positions = np.clip(state.positions, lo, hi)
    ev = _Evaluator(prob, params.eta_inv)
    blocks = [None] + list(range(prob.n_marginals))
    steps = [params.initial_step] * len(blocks)
    F, cost, pen = objective_terms(prob, state, params.eta_inv)
    gpos, glog = gradient(prob, state, params.eta_inv)
    gnorm = _projected_grad_norm(prob, state, gpos, glog)
    rows = [(0, F, cost, pen, gnorm)]
    converged, message = gnorm < params.tol, ""
    it = 0
    while not converged and it < params.max_iter:
        it += 1
        failed = 0
        ev.load(state)
        for b, blk in enumerate(blocks):
            g = ev.block_gradient(blk)
            trial = min(params.initial_step, 4.0 * steps[b])
            state, F_new, status, step = _line_search(ev, state, blk, F, g, params,
                                                      lo, hi, trial)
            if F_new > F:
                raise AssertionError("line search increased the objective")
            if status == "moved":
                steps[b] = step
                ev.commit(state, blk, None if blk is None else ev.last_V)
            F = F_new
            failed += status == "failed"
        F, cost, pen = objective_terms(prob, state, params.eta_inv)
        gpos, glog = gradient(prob, state, params.eta_inv)
        gnorm = _projected_grad_norm(prob, state, gpos, glog)
        rows.append((it, F, cost, pen, gnorm))
        if callback is not None:
            callback(it, state, F)
        if gnorm < params.tol:
            converged = True
        elif failed == len(blocks):
            message = "line search failed on every block"
            break
    if not converged and not message:
        message = "iteration cap reached"
    trace = np.array(rows, dtype=float)
    return PGDResult(state, trace, converged, it, message,
                     residuals(prob, state.to_measure()))


# ---------------------------------------------------------------------------


def transport_map_summary(prob, state):
    """(source, target, weight) triples sorted by weight, largest first."""
    parts = prob.split(state.positions)
    w = state.weights
    order = np.argsort(-w, kind="stable")
    return [(parts[0][k].copy(), parts[1][k].copy(), float(w[k])) for k in order]


def trace_to_csv(trace):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["iter", "F", "cost", "penalty", "grad_norm"])
    for row in trace:
        wr.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
    return buf.getvalue()


def state_to_csv(prob, state):
    """Final particles with header ``w,x...,y...``."""
    names = []
    letters = "xyzuvw"
    for i, d in enumerate(prob.dims):
        base = letters[i] if i < len(letters) else f"m{i + 1}_"
        names += [base] if d == 1 else [f"{base}{j + 1}" for j in range(d)]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["w"] + names)
    for wk, z in zip(state.weights, state.positions):
        wr.writerow([repr(float(wk))] + [repr(float(v)) for v in z])
    return buf.getvalue()
