"""Problem assembly for moment-constrained transport: costs, constraint
residuals, support caps, admissibility witnesses and support clamping.

A coupling is a :class:`~mcot.measures.DiscreteMeasure` whose points
concatenate the coordinates of every marginal, e.g. ``(x, y)`` for two
one-dimensional marginals or ``(x1, x2, y1, y2)`` for two planar ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.optimize

from . import linprog
from .measures import DiscreteMeasure, Marginal1D
from .testfns import TestFamily, gaussian_moments, moments

__all__ = [
    "CostFunction",
    "MarginalConstraint",
    "MartingaleConstraint",
    "MCOTProblem",
    "ConstraintResidual",
    "InadmissibleError",
    "StructureError",
    "residuals",
    "cost_of",
    "check_admissible",
    "clamp_to_kbar",
    "two_marginal_problem",
    "multimarginal_problem",
    "martingale_problem",
    "gaussian_problem",
]

COULOMB_GUARD = 1e-9


class StructureError(ValueError):
    """Point dimension or problem layout mismatch."""


class InadmissibleError(RuntimeError):
    """No moment-feasible coupling was found."""


@dataclass(frozen=True)
class CostFunction:
    """A transport cost evaluated on stacked marginal coordinates.

    Kinds
    -----
    ``power``
        ``|x - y|**p`` (Euclidean norm), two marginals of equal dimension.
        ``quadratic2d`` is the same with ``p = 2`` on planar marginals.
    ``coulomb``
        ``sum_{i<j} 1/|x_i - x_j|`` over ``n_marginals`` marginals; atoms
        with a pair closer than 1e-9 cost ``+inf``.
    ``custom``
        A user callable ``func(*parts) -> (K,)`` with optional gradient
        ``grad(*parts) -> list of arrays`` and Lipschitz constant.
    """

    kind: str
    p: float = 2.0
    n_marginals: int = 2
    func: Optional[Callable] = field(default=None, compare=False)
    grad_func: Optional[Callable] = field(default=None, compare=False)
    lipschitz_const: Optional[float] = None
    label: str = ""

    @classmethod
    def power(cls, p):
        return cls("power", p=float(p), label=f"|x-y|^{p:g}")

    @classmethod
    def quadratic2d(cls):
        return cls("power", p=2.0, label="|x-y|^2 (planar)")

    @classmethod
    def coulomb(cls, M):
        return cls("coulomb", n_marginals=int(M), label=f"coulomb(M={M})")

    @classmethod
    def custom(cls, func, grad=None, lipschitz=None, n_marginals=2, label="custom"):
        return cls("custom", func=func, grad_func=grad, n_marginals=n_marginals,
                   lipschitz_const=lipschitz, label=label)

    @property
    def symmetric(self):
        return self.kind in ("power", "coulomb")

    @property
    def differentiable(self):
        if self.kind == "custom":
            return self.grad_func is not None
        return True

    def evaluate(self, parts):
        """Cost of each atom; ``parts`` lists the (K, d) coordinate blocks."""
        if self.kind == "power":
            d = np.linalg.norm(parts[0] - parts[1], axis=1)
            return d ** self.p
        if self.kind == "coulomb":
            total = np.zeros(parts[0].shape[0])
            for i in range(len(parts)):
                for j in range(i + 1, len(parts)):
                    r = np.linalg.norm(parts[i] - parts[j], axis=1)
                    with np.errstate(divide="ignore"):
                        total = total + np.where(r < COULOMB_GUARD, np.inf, 1.0 / r)
            return total
        return np.asarray(self.func(*parts), dtype=float)

    def gradient(self, parts):
        """Gradient blocks matching ``parts``."""
        if self.kind == "power":
            diff = parts[0] - parts[1]
            r = np.linalg.norm(diff, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                fac = np.where(r > 0.0, self.p * r ** (self.p - 2.0), 0.0)
            g = fac[:, None] * diff
            return [g, -g]
        if self.kind == "coulomb":
            grads = [np.zeros_like(q) for q in parts]
            for i in range(len(parts)):
                for j in range(i + 1, len(parts)):
                    diff = parts[i] - parts[j]
                    r = np.maximum(np.linalg.norm(diff, axis=1), COULOMB_GUARD)
                    g = -diff / r[:, None] ** 3
                    grads[i] += g
                    grads[j] -= g
            return grads
        if self.grad_func is None:
            raise NotImplementedError("custom cost has no gradient")
        return [np.asarray(g, dtype=float) for g in self.grad_func(*parts)]

    def lipschitz(self, diameter=1.0):
        """Constant K with |c(x,y) - c(x',y')| <= K max(|x-x'|, |y-y'|) on a box
        of the given diameter (``inf`` when unbounded)."""
        if self.kind == "power":
            return 2.0 * self.p * diameter ** (self.p - 1.0)
        if self.kind == "coulomb":
            return np.inf
        return np.inf if self.lipschitz_const is None else float(self.lipschitz_const)


@dataclass(frozen=True)
class MarginalConstraint:
    """Moment constraints of one marginal: a family and its targets."""

    family: TestFamily
    targets: np.ndarray
    marginal: object = None

    @property
    def dim(self):
        return self.family.dim

    @property
    def box(self):
        return (self.family.lo, self.family.hi)


@dataclass(frozen=True)
class MartingaleConstraint:
    """Relaxed martingale rows ``sum_k p_k chi_l(x_k) (y_k - x_k) = 0``.

    ``source`` and ``target`` index the marginals playing x and y.
    """

    family: TestFamily
    source: int = 0
    target: int = 1


@dataclass(frozen=True)
class MCOTProblem:
    """Cost, per-marginal moment constraints and optional martingale rows.

    In symmetric mode all marginals share one constraint (stored once per
    marginal) and residuals use the coordinate average
    ``(1/M) sum_i phi_n(x_i)``.
    """

    constraints: tuple
    cost: CostFunction
    martingale: Optional[MartingaleConstraint] = None
    symmetric: bool = False
    variant: str = "two"

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if self.symmetric:
            fams = {c.family.name for c in self.constraints}
            same = all(np.array_equal(c.targets, self.constraints[0].targets)
                       for c in self.constraints)
            if len(fams) != 1 or not same:
                raise StructureError("symmetric mode needs identical marginal constraints")
            if not self.cost.symmetric:
                raise StructureError("symmetric mode needs a symmetric cost")

    @property
    def n_marginals(self):
        return len(self.constraints)

    @property
    def dims(self):
        return [c.dim for c in self.constraints]

    @property
    def total_dim(self):
        return int(sum(self.dims))

    def slices(self):
        out, start = [], 0
        for d in self.dims:
            out.append(slice(start, start + d))
            start += d
        return out

    def split(self, points):
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != self.total_dim:
            raise StructureError(
                f"points have dimension {points.shape[-1]}, expected {self.total_dim}")
        return [points[:, s] for s in self.slices()]

    @property
    def support_cap(self):
        """Number of atoms the discrete-minimiser bound allows: one per
        constrained function, plus one for the mass and one for the cost."""
        sizes = [c.family.size for c in self.constraints]
        if self.symmetric:
            return sizes[0] + 2
        cap = sum(sizes) + 2
        if self.martingale is not None:
            cap += self.martingale.family.size
        return cap

    @property
    def n_constraints(self):
        n = sum(c.family.size for c in self.constraints)
        if self.symmetric:
            n = self.constraints[0].family.size
        if self.martingale is not None:
            n += self.martingale.family.size
        return n

    def boxes(self):
        """Per-coordinate lower and upper bounds of the domain box."""
        lo = np.concatenate([[c.family.lo] * c.dim for c in self.constraints])
        hi = np.concatenate([[c.family.hi] * c.dim for c in self.constraints])
        return lo, hi


@dataclass(frozen=True)
class ConstraintResidual:
    """Signed moment residuals of a candidate coupling."""

    marginal: tuple
    martingale: Optional[np.ndarray] = None

    @property
    def max_abs(self):
        vals = [np.max(np.abs(r)) for r in self.marginal if r.size]
        if self.martingale is not None and self.martingale.size:
            vals.append(np.max(np.abs(self.martingale)))
        return float(max(vals)) if vals else 0.0

    @property
    def martingale_max_abs(self):
        if self.martingale is None:
            return 0.0
        return float(np.max(np.abs(self.martingale)))

    def flat(self):
        parts = list(self.marginal)
        if self.martingale is not None:
            parts.append(self.martingale)
        return np.concatenate(parts)


def constraint_values(prob, parts):
    """Per-marginal test-function matrices (K, n_i) at the atoms; in
    symmetric mode a single averaged matrix."""
    mats = [c.family.values(q if c.dim > 1 else q[:, 0])
            for c, q in zip(prob.constraints, parts)]
    if prob.symmetric:
        return [sum(mats) / len(mats)]
    return mats


def martingale_values(prob, parts):
    """Matrix (K, n') of chi_l(x_k) (y_k - x_k)."""
    mg = prob.martingale
    x = parts[mg.source][:, 0]
    y = parts[mg.target][:, 0]
    return mg.family.values(x) * (y - x)[:, None]


def residuals(prob, measure):
    """Signed residuals ``sum_k p_k phi_m(x_k) - mu_m`` per marginal, plus
    martingale residuals ``sum_k p_k chi_l(x_k)(y_k - x_k)`` if present."""
    parts = prob.split(measure.points)
    w = measure.weights
    mats = constraint_values(prob, parts)
    targets = [prob.constraints[0].targets] if prob.symmetric else \
        [c.targets for c in prob.constraints]
    res = tuple(w @ V - t for V, t in zip(mats, targets))
    mg = None
    if prob.martingale is not None:
        mg = w @ martingale_values(prob, parts)
    return ConstraintResidual(res, mg)


def cost_of(prob, measure):
    """``sum_k p_k c(z_k)``; ``+inf`` if an atom of positive weight has
    infinite cost."""
    parts = prob.split(measure.points)
    c = prob.cost.evaluate(parts)
    w = measure.weights
    pos = w > 0.0
    if np.any(~np.isfinite(c[pos])):
        return np.inf
    return float(np.dot(w[pos], c[pos]))


# ---------------------------------------------------------------------------
# constructors


def _marginal_constraint(marginal, family):
    if isinstance(marginal, Marginal1D):
        t = moments(family, marginal).values
    else:
        t = gaussian_moments(family, marginal).values
    return MarginalConstraint(family, np.asarray(t, dtype=float), marginal)


def two_marginal_problem(mu, nu, family_x, family_y, cost):
    """Two one-dimensional (or planar) marginals with their own families."""
    return MCOTProblem((_marginal_constraint(mu, family_x),
                        _marginal_constraint(nu, family_y)), cost, variant="two")


def multimarginal_problem(marginals, families, cost, symmetric=False):
    cons = [_marginal_constraint(m, f) for m, f in zip(marginals, families)]
    return MCOTProblem(tuple(cons), cost, symmetric=symmetric,
                       variant="sym" if symmetric else "multi")


def martingale_problem(mu, nu, family_x, family_y, chi_family, cost):
    return MCOTProblem((_marginal_constraint(mu, family_x),
                        _marginal_constraint(nu, family_y)), cost,
                       martingale=MartingaleConstraint(chi_family), variant="martingale")


def gaussian_problem(mu, nu, family):
    """Planar quadratic problem between two normal laws on the family's box."""
    return MCOTProblem((_marginal_constraint(mu, family),
                        _marginal_constraint(nu, family)),
                       CostFunction.quadratic2d(), variant="two")


# ---------------------------------------------------------------------------
# admissibility


def _axis_candidates(constraint, refine):
    fam = constraint.family
    N = fam.N
    t = np.unique(np.concatenate([np.arange(N * refine + 1) / (N * refine),
                                  np.clip(fam.breakpoints(), 0.0, 1.0)]))
    if fam.dim == 1:
        return (fam.lo + (fam.hi - fam.lo) * t)[:, None]
    g = fam.lo + (fam.hi - fam.lo) * np.arange(N * refine + 1) / (N * refine)
    return np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)


def _marginal_witness(constraint, refine):
    cand = _axis_candidates(constraint, refine)
    fam = constraint.family

    def vals(z):
        return fam.values(z if fam.dim > 1 else z[:, 0])

    sol = linprog.weights_for_support(cand, [(vals, constraint.targets)],
                                      np.zeros(cand.shape[0]))
    if not sol.optimal:
        return None
    keep = sol.x > 0.0
    return cand[keep], sol.x[keep] / sol.x[keep].sum()


def check_admissible(prob, refine=(2, 4, 16)):
    """Build a finite-cost coupling satisfying every constraint.

    Each marginal's moments are matched by LP weights on a refined grid;
    the product of these discrete marginals is then reduced to at most
    ``n_constraints + 1`` atoms. With martingale rows the LP is solved
    jointly on the product grid instead.

    Raises
    ------
    InadmissibleError
        When no grid refinement yields a feasible LP (inconsistent targets).
    """
    if prob.cost.kind == "coulomb":
        raise InadmissibleError("witness construction needs a finite-valued cost")
    last = None
    for r in refine:
        if prob.martingale is None:
            wit = [_marginal_witness(c, r) for c in prob.constraints]
            if any(w is None for w in wit):
                last = "marginal moments infeasible on the refined grid"
                continue
            measure = _product(wit)
        else:
            measure = _joint_witness(prob, r)
            if measure is None:
                last = "martingale rows infeasible on the refined grid"
                continue
        measure = linprog.tchakaloff_reduce(measure, lambda z: _all_rows(prob, z))
        res = residuals(prob, measure)
        if res.max_abs <= 1e-9:
            return measure
        last = f"witness residual {res.max_abs:.3g}"
    raise InadmissibleError(f"no admissible coupling found: {last}")


def _all_rows(prob, z):
    parts = prob.split(z)
    mats = constraint_values(prob, parts)
    if prob.martingale is not None:
        mats.append(martingale_values(prob, parts))
    return np.hstack(mats)


def _product(wit):
    pts, w = wit[0]
    for p2, w2 in wit[1:]:
        K1, K2 = pts.shape[0], p2.shape[0]
        pts = np.hstack([np.repeat(pts, K2, axis=0), np.tile(p2, (K1, 1))])
        w = np.outer(w, w2).ravel()
    return DiscreteMeasure(pts, w / w.sum())


def _joint_witness(prob, refine):
    axes = [_axis_candidates(c, refine) for c in prob.constraints]
    K1, K2 = axes[0].shape[0], axes[1].shape[0]
    grid = np.hstack([np.repeat(axes[0], K2, axis=0), np.tile(axes[1], (K1, 1))])
    parts = prob.split(grid)
    rows = [np.ones((1, grid.shape[0]))]
    rhs = [np.ones(1)]
    for V, c in zip(constraint_values(prob, parts), prob.constraints):
        rows.append(V.T)
        rhs.append(c.targets)
    Mg = martingale_values(prob, parts)
    rows.append(Mg.T)
    rhs.append(np.zeros(Mg.shape[1]))
    # any feasible point will do; the product grid is too large and too
    # degenerate for the dense simplex, so HiGHS finds it
    res = scipy.optimize.linprog(np.zeros(grid.shape[0]), A_eq=np.vstack(rows),
                                 b_eq=np.concatenate(rhs), bounds=(0, None),
                                 method="highs")
    if res.status != 0:
        return None
    x = np.where(res.x < linprog.WEIGHT_FLOOR, 0.0, res.x)
    keep = x > 0.0
    return DiscreteMeasure(grid[keep], x[keep] / x[keep].sum())


# ---------------------------------------------------------------------------
# support clamping


def clamp_to_kbar(prob, measure):
    """Move atoms lying far from the test-function supports.

    Applies to two-marginal problems with a power cost; the supports S_X,
    S_Y are the families' domain boxes (functions vanish outside). With
    ``M`` the largest cost on S_X x S_Y:

    * atoms in K = (S_X x S~_Y) U (S~_X x S_Y), where S~ collects points
      within cost M + 1 of the other support, are kept;
    * atoms with both coordinates outside the supports go to a zero-cost
      diagonal point outside K;
    * atoms with one coordinate in its support and the other beyond S~ have
      the far coordinate slid towards the support until the cost equals
      (2M + 1)/2.

    Moments are unchanged and the cost does not increase.
    """
    if prob.n_marginals != 2 or prob.cost.kind != "power":
        raise StructureError("clamping is implemented for two marginals and power costs")
    p = prob.cost.p
    (xlo, xhi), (ylo, yhi) = prob.constraints[0].box, prob.constraints[1].box
    M = max(abs(xhi - ylo), abs(yhi - xlo)) ** p
    reach = (M + 1.0) ** (1.0 / p)
    target = (2.0 * M + 1.0) / 2.0
    far = max(xhi, yhi) + reach + 1.0

    def inside(v, lo, hi):
        return np.all((v >= lo) & (v <= hi), axis=-1)

    parts = prob.split(measure.points)
    x, y = parts[0].copy(), parts[1].copy()
    in_x = inside(x, xlo, xhi)
    in_y = inside(y, ylo, yhi)
    near_y = inside(y, xlo - reach, xhi + reach)  # y in S~_Y
    near_x = inside(x, ylo - reach, yhi + reach)  # x in S~_X
    for k in range(x.shape[0]):
        if (in_x[k] and near_y[k]) or (in_y[k] and near_x[k]):
            continue
        if not in_x[k] and not in_y[k]:
            x[k] = far
            y[k] = far
        elif in_x[k]:
            y[k] = _slide(x[k], y[k], np.clip(y[k], ylo, yhi), p, target)
        else:
            x[k] = _slide(y[k], x[k], np.clip(x[k], xlo, xhi), p, target)
    return DiscreteMeasure(np.hstack([x, y]), measure.weights)


def _slide(anchor, far_pt, near_pt, p, target):
    def cost(lam):
        return np.linalg.norm(anchor - (near_pt + lam * (far_pt - near_pt))) ** p

    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if cost(mid) < target:
            lo = mid
        else:
            hi = mid
    return near_pt + lo * (far_pt - near_pt)
