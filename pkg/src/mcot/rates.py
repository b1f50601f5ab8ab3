"""Convergence-rate experiments: numerical sandwiches between moment
constrained values and exact transport costs, with every asserted inequality
stored as a row that can be re-checked from CSV alone.

Each row of a :class:`RateReport` is one inequality
``lower - tol <= gap <= bound + tol`` with ``gap = exact - approx`` (or the
quantity named in the ``check`` column).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
from numpy.polynomial import Polynomial

from .linprog import northwest_corner, transport_lp
from .measures import (DomainError, GaussianMarginal2D, Marginal1D,
                       bures_gaussian_cost, cell_masses, hat_measure,
                       real_roots_in, wasserstein_1d)
from .mh import CellProblem, cell_cost_matrix, cell_problem_optimum
from .problem import CostFunction, StructureError
from .testfns import Hat, RegularizedPosPart, martingale_family, moments

__all__ = [
    "RateReport",
    "pwc_sandwich",
    "ReconstructedCoupling",
    "reconstruct_coupling",
    "sign_changes",
    "max_density_difference",
    "affine_w1_rate",
    "affine_w2_rate",
    "smooth_companion",
    "smooth_moment_bound",
    "regularity_counterexample",
    "pwc_moment_matching",
    "convergence_sweep",
    "martingale_sweep",
    "grid_lp_value",
    "compute_oracles",
    "check_fixtures",
]

LP_TOL = 1e-9
PROXY_TOL = 1e-6
COLUMNS = ("check", "N", "exact", "approx", "gap", "lower", "bound", "satisfied")


@dataclass
class RateReport:
    """Rows of checked inequalities plus run metadata."""

    experiment: str
    tolerance: float
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, check, N, exact, approx, bound, lower=0.0, gap=None):
        gap = exact - approx if gap is None else gap
        ok = bool(lower - self.tolerance <= gap <= bound + self.tolerance)
        self.rows.append((check, int(N), float(exact), float(approx), float(gap),
                          float(lower), float(bound), ok))
        return ok

    @property
    def passed(self):
        return all(r[-1] for r in self.rows)

    @property
    def worst_margin(self):
        """Smallest slack ``min(bound + tol - gap, gap - lower + tol)``."""
        if not self.rows:
            return math.inf
        return float(min(min(r[6] + self.tolerance - r[4], r[4] - r[5] + self.tolerance)
                         for r in self.rows))

    def recheck(self):
        """Re-evaluate the stored flags from the stored numbers."""
        return all((r[5] - self.tolerance <= r[4] <= r[6] + self.tolerance) == r[7]
                   for r in self.rows)

    def column(self, name, check=None):
        k = COLUMNS.index(name)
        return np.array([r[k] for r in self.rows if check is None or r[0] == check])

    def to_csv(self):
        lines = [",".join(COLUMNS)]
        for r in self.rows:
            lines.append(",".join([r[0], str(r[1])] + [repr(v) for v in r[2:7]]
                                  + [str(r[7]).lower()]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text, experiment="", tolerance=0.0):
        rep = cls(experiment, tolerance)
        for line in text.strip().splitlines()[1:]:
            f = line.split(",")
            rep.rows.append((f[0], int(f[1]), *map(float, f[2:7]), f[7] == "true"))
        return rep

    def summary(self):
        return {"experiment": self.experiment, "pass": self.passed,
                "worst_margin": self.worst_margin}


# ---------------------------------------------------------------------------
# piecewise constant family


def _power_exponent(cost):
    if cost.kind != "power":
        raise StructureError("this experiment needs a power cost |x - y|^p")
    return cost.p


def _midpoint_costs(N, cost):
    mid = (np.arange(N) + 0.5) / N
    X, Y = np.meshgrid(mid, mid, indexing="ij")
    return cost.evaluate([X.reshape(-1, 1), Y.reshape(-1, 1)]).reshape(N, N)


def pwc_sandwich(mu, nu, cost, N_list, K=None, exact=None, tol=LP_TOL):
    """Cell-problem sandwich for piecewise-constant test functions.

    For each N the midpoint cell problem ``J^N`` (transport LP on cell
    masses with costs at cell midpoints) and the exact cell value ``I^N``
    (costs minimised over each closed cell) are computed, and three checks
    are stored:

    * ``J<=I<=J+K/2N``: ``0 <= I - J^N <= K/(2N)`` with the supplied K;
    * ``IN<=J<=IN+K/2N``: ``0 <= J^N - I^N <= K_c/(2N)`` where ``K_c`` is
      the cost's own Lipschitz constant for the max norm (2p for
      ``|x - y|^p`` on [0, 1]); this side is sharp, so a smaller K fails.

    Parameters
    ----------
    K : float, optional
        Constant for the first check; defaults to ``cost.lipschitz(1.0)``.
    exact : float, optional
        The transport cost I; defaults to ``W_p^p`` for power costs.
    """
    Kc = cost.lipschitz(1.0)
    K = Kc if K is None else float(K)
    if exact is None:
        exact = wasserstein_1d(mu, nu, _power_exponent(cost))
    rep = RateReport("pwc", tol, metadata={"K": K, "K_cost": Kc, "cost": cost.label,
                                           "mu": repr(mu), "nu": repr(nu)})
    worst_nw = 0.0
    for N in N_list:
        a, b = cell_masses(mu, N), cell_masses(nu, N)
        C = _midpoint_costs(N, cost)
        J, _ = transport_lp(a, b, C)
        if cost.kind == "power":
            worst_nw = max(worst_nw, abs(J - float(np.sum(northwest_corner(a, b) * C))))
        IN, _ = transport_lp(a, b, cell_cost_matrix(N, cost))
        rep.add("J<=I<=J+K/2N", N, exact, J, K / (2 * N))
        rep.add("IN<=J<=IN+Kc/2N", N, J, IN, Kc / (2 * N))
    rep.metadata["lp_vs_monotone_max_diff"] = worst_nw
    return rep


@dataclass
class ReconstructedCoupling:
    """Coupling spreading each cell block ``pi_bar[m, n]`` as the product of
    the normalised restrictions of mu to ``T_m`` and nu to ``T_n``."""

    pi_bar: np.ndarray
    mu: Marginal1D
    nu: Marginal1D

    @property
    def N(self):
        return self.pi_bar.shape[0]

    def cell_probabilities(self):
        """Mass of every cell block, ``mu(T_m) pi_bar[m, n] / sum_n' pi_bar[m, n']``.

        Equal to ``pi_bar`` when its row sums are the cell masses of mu.
        """
        a = cell_masses(self.mu, self.N)
        rows = self.pi_bar.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(rows > 0.0, a[:, None] * self.pi_bar / rows, 0.0)
        return out

    def sample(self, size, rng):
        """Draw ``size`` pairs: a cell block by ``pi_bar``, then x and y by
        inverse transform inside their cells."""
        N = self.N
        p = self.pi_bar.ravel() / self.pi_bar.sum()
        k = rng.choice(p.size, size=size, p=p)
        m, n = np.divmod(k, N)
        out = np.empty((size, 2))
        for col, law, idx in ((0, self.mu, m), (1, self.nu, n)):
            lo = law.cdf(np.clip(idx / N, 0.0, 1.0))
            hi = law.cdf(np.clip((idx + 1) / N, 0.0, 1.0))
            out[:, col] = law.inverse_cdf(lo + rng.random(size) * (hi - lo))
        return out


def reconstruct_coupling(pi_bar, mu, nu):
    """Validate a cell matrix and wrap it as a :class:`ReconstructedCoupling`.

    Raises
    ------
    StructureError
        If a cell of zero mass carries positive entries of ``pi_bar``.
    """
    pi_bar = np.asarray(pi_bar, dtype=float)
    N = pi_bar.shape[0]
    if pi_bar.shape != (N, N) or np.any(pi_bar < 0):
        raise StructureError("pi_bar must be a non-negative square matrix")
    a, b = cell_masses(mu, N), cell_masses(nu, N)
    if np.any((a == 0.0) & (pi_bar.sum(axis=1) > 0.0)) \
            or np.any((b == 0.0) & (pi_bar.sum(axis=0) > 0.0)):
        raise StructureError("positive block on a cell of zero mass")
    return ReconstructedCoupling(pi_bar, mu, nu)


# ---------------------------------------------------------------------------
# affine families


def _merged_pieces(mu, nu):
    if mu.is_discrete or nu.is_discrete:
        raise DomainError("density-based rates need absolutely continuous laws")
    edges = np.unique(np.concatenate([mu.breaks, nu.breaks]))
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        mid = 0.5 * (lo + hi)
        i = min(np.searchsorted(mu.breaks, mid) - 1, len(mu.rho) - 1)
        j = min(np.searchsorted(nu.breaks, mid) - 1, len(nu.rho) - 1)
        out.append((lo, hi, mu, i, nu, j))
    return out


def sign_changes(mu, nu):
    """Number of sign changes of ``F_mu - F_nu`` inside (0, 1), found by
    isolating the real roots of the piecewise polynomial difference."""
    signs = []
    for lo, hi, m1, i, m2, j in _merged_pieces(mu, nu):
        d = m1.F[i].convert() - m2.F[j].convert()
        pts = [lo] + sorted(real_roots_in(d, lo, hi, closed=False, imag_tol=1e-10)) + [hi]
        for s, t in zip(pts[:-1], pts[1:]):
            v = d(0.5 * (s + t))
            if abs(v) > 1e-13:
                signs.append(np.sign(v))
    return int(sum(1 for s, t in zip(signs[:-1], signs[1:]) if s != t))


def max_density_difference(mu, nu):
    """``sup |rho_mu - rho_nu|`` over [0, 1]."""
    best = 0.0
    for lo, hi, m1, i, m2, j in _merged_pieces(mu, nu):
        d = m1.rho[i].convert() - m2.rho[j].convert()
        pts = [lo, hi] + real_roots_in(d.deriv(), lo, hi)
        best = max(best, max(abs(d(t)) for t in pts))
    return float(best)


def grid_lp_value(cost, families, targets, grid, martingale=None):
    """Optimal cost over couplings supported on ``grid x grid`` meeting the
    moment targets exactly.

    Restricting the support makes this an upper bound of the moment
    constrained value; it is exact in the limit of fine grids.

    Parameters
    ----------
    families : (TestFamily, TestFamily)
    targets : (ndarray, ndarray)
    grid : ndarray
        One-dimensional node set used on both axes.
    martingale : TestFamily, optional
        Adds rows ``sum p chi_l(x)(y - x) = 0``.
    """
    X, Y = np.meshgrid(grid, grid, indexing="ij")
    x, y = X.ravel(), Y.ravel()
    rows = [np.ones((1, x.size)), families[0].values(x).T, families[1].values(y).T]
    rhs = [np.ones(1), np.asarray(targets[0]), np.asarray(targets[1])]
    if martingale is not None:
        rows.append((martingale.values(x) * (y - x)[:, None]).T)
        rhs.append(np.zeros(martingale.size))
    c = cost.evaluate([x[:, None], y[:, None]])
    # thousands of degenerate columns: past the desk scale of linprog.solve
    res = scipy.optimize.linprog(c, A_eq=np.vstack(rows), b_eq=np.concatenate(rhs),
                                 bounds=(0, None), method="highs")
    if res.status != 0:
        raise StructureError(f"grid LP failed: {res.message}")
    return float(res.fun)


def _grid(N, points=40):
    G = N * max(1, points // N)
    return np.arange(G + 1) / G


def affine_w1_rate(mu, nu, N_list, Q=None, grid_points=40, tol=PROXY_TOL):
    """``I^N <= W_1 <= I^N + 2 ||rho_mu - rho_nu||_inf Q / N^2`` with Hat(N)
    test functions.

    ``I^N`` is replaced by an upper proxy: the smaller of the hat-measure
    substitution value ``W_1(mu^N, nu^N)`` and the grid LP value. The
    stored check is ``-tol <= W_1 - proxy <= bound + tol``; the lower side
    flags a proxy that overshoots W_1.
    """
    W = wasserstein_1d(mu, nu, 1)
    Q = sign_changes(mu, nu) if Q is None else int(Q)
    D = max_density_difference(mu, nu)
    rep = RateReport("w1", tol, metadata={"Q": Q, "density_diff": D, "W1": W})
    for N in N_list:
        fam = Hat(N)
        hat = wasserstein_1d(hat_measure(mu, N), hat_measure(nu, N), 1)
        lp = grid_lp_value(CostFunction.power(1), (fam, fam),
                           (moments(fam, mu).values, moments(fam, nu).values),
                           _grid(N, grid_points))
        rep.add("IN<=W1<=IN+2DQ/N^2", N, W, min(hat, lp), 2.0 * D * Q / N ** 2)
    return rep


def affine_w2_rate(mu, nu, N_list, tol=PROXY_TOL):
    """Hat-measure substitution check of the W_2 rate:
    ``|W_2^2(mu^N, nu^N) - W_2^2(mu, nu)| <= (7/3)(||rho_mu|| + ||rho_nu||)/N^2``.

    The row stores the absolute difference as the gap, with lower bound 0.
    """
    W = wasserstein_1d(mu, nu, 2)
    S = mu.max_density() + nu.max_density()
    rep = RateReport("w2", tol, metadata={"W2sq": W, "density_sum": S})
    for N in N_list:
        h = wasserstein_1d(hat_measure(mu, N), hat_measure(nu, N), 2)
        rep.add("|W2hat-W2|<=7S/3N^2", N, W, h, 7.0 * S / (3.0 * N ** 2),
                gap=abs(W - h))
    return rep


# ---------------------------------------------------------------------------
# smooth marginals


# (1 - t^2)^2 (1 - 7 t^2) on [-1, 1]: orthogonal to 1 and t, C^1 at the ends
_BUMP = Polynomial([1.0, 0.0, -2.0, 0.0, 1.0]) * Polynomial([1.0, 0.0, -7.0])


def _min_density(m):
    best = np.inf
    for k, rho in enumerate(m.rho):
        lo, hi = m.breaks[k], m.breaks[k + 1]
        pts = [lo, hi] + real_roots_in(rho.deriv(), lo, hi)
        best = min(best, min(rho(t) for t in pts))
    return float(best)


def smooth_companion(mu, N, amplitude=0.5):
    """A law with a C^2 CDF and the same Hat-and-slope (AffinePair) moments
    as ``mu``.

    On every cell the density of ``mu`` gets a multiple of the bump
    ``(1 - t^2)^2 (1 - 7 t^2)`` in the local variable t in [-1, 1], scaled
    by ``amplitude`` times the smallest density value on the cell so the
    result stays non-negative. ``mu`` must be a single polynomial density.
    """
    if mu.is_discrete or len(mu.rho) != 1:
        raise DomainError("smooth companion needs a single-piece polynomial density")
    rho = mu.rho[0]
    lo_bump = -float(min(_BUMP(t) for t in np.linspace(-1, 1, 2001)))
    breaks = np.arange(N + 1) / N
    coeffs = []
    for m in range(N):
        a, b = breaks[m], breaks[m + 1]
        floor = float(np.min(rho(np.linspace(a, b, 201))))
        delta = amplitude * floor / lo_bump
        # local variable t in [-1, 1] through the domain/window map
        local = rho.convert(domain=[a, b], window=[-1.0, 1.0])
        coeffs.append(local + Polynomial(delta * _BUMP.coef, domain=[a, b],
                                         window=[-1.0, 1.0]))
    return Marginal1D.piecewise_poly(breaks, coeffs, label=f"companion(N={N})")


def smooth_moment_bound(mu, N_list, p=1, amplitude=0.5, tol=PROXY_TOL):
    """Check the smooth-marginal bound on ``(mu, smooth_companion(mu, N))``.

    ``p = 1``: ``W_1 <= (||F_1''|| + ||F_2''||)/(3 N^2)``.
    ``p > 1``: the bound is multiplied by
    ``(p!)^(1/p) (5/2 (1/m_1 + 1/m_2))^((p-1)/p)`` with ``m_i`` the minimal
    densities, which must be positive.
    """
    rep = RateReport(f"smooth_p{p}", tol, metadata={"p": p, "mu": repr(mu)})
    for N in N_list:
        nu = smooth_companion(mu, N, amplitude)
        S = mu.max_density_slope() + nu.max_density_slope()
        bound = S / (3.0 * N ** 2)
        if p > 1:
            m1, m2 = _min_density(mu), _min_density(nu)
            if min(m1, m2) <= 0.0:
                raise DomainError("the W_p bound needs densities bounded below")
            bound *= math.factorial(p) ** (1.0 / p) * \
                (2.5 * (1.0 / m1 + 1.0 / m2)) ** ((p - 1.0) / p)
        W = wasserstein_1d(mu, nu, p) ** (1.0 / p)
        rep.add(f"W{p}<=bound", N, W, 0.0, bound)
    return rep


def regularity_counterexample(N_list, tol=1e-12):
    """Uniform law against N equal atoms at the cell midpoints: both share
    the AffinePair moments, yet ``W_1 = 1/(4N)``, only first order in 1/N.
    Stored as the two-sided check ``0 <= W_1 - 1/(4N) <= 0``."""
    rep = RateReport("counterexample", tol)
    U = Marginal1D.uniform(0.0, 1.0)
    for N in N_list:
        atoms = Marginal1D.empirical((np.arange(N) + 0.5) / N)
        W = wasserstein_1d(U, atoms, 1)
        rep.add("W1=1/4N", N, W, 1.0 / (4 * N), 0.0)
    return rep


def pwc_moment_matching(mu, N_list, p_list, trials, rng, max_atoms=3, tol=1e-9):
    """Random discrete laws with the cell masses of ``mu`` stay within
    ``1/N`` of ``mu`` in every W_p.

    Each trial puts 1 to ``max_atoms`` uniform atoms in every cell and
    splits the cell mass between them with Dirichlet weights.
    """
    rep = RateReport("pwc_matching", tol)
    for N in N_list:
        masses = cell_masses(mu, N)
        for _ in range(trials):
            atoms, weights = [], []
            for m in range(N):
                if masses[m] == 0.0:
                    continue
                k = int(rng.integers(1, max_atoms + 1))
                atoms.append((m + rng.random(k)) / N)
                weights.append(masses[m] * rng.dirichlet(np.ones(k)))
            emp = Marginal1D.empirical(np.concatenate(atoms), np.concatenate(weights))
            for p in p_list:
                W = wasserstein_1d(mu, emp, p) ** (1.0 / p)
                rep.add(f"W{p}<=1/N", N, W, 0.0, 1.0 / N)
    return rep


# ---------------------------------------------------------------------------
# nested families


def convergence_sweep(mu, nu, cost, N_list, exact=None, tol=LP_TOL):
    """Exact cell values ``I^N`` along a dyadic list must be non-decreasing
    and stay below ``I``.

    Rows ``IN<=I2N`` store ``gap = I^{2N} - I^N >= 0`` (bound +inf) and
    rows ``IN<=I`` store ``gap = I - I^N >= 0``.
    """
    N_list = list(N_list)
    if any(b != 2 * a for a, b in zip(N_list[:-1], N_list[1:])):
        raise ValueError("N list must be dyadic: N, 2N, 4N, ...")
    if exact is None:
        exact = wasserstein_1d(mu, nu, _power_exponent(cost))
    rep = RateReport("sweep", tol, metadata={"I": exact})
    vals = []
    for N in N_list:
        v, _ = transport_lp(cell_masses(mu, N), cell_masses(nu, N),
                            cell_cost_matrix(N, cost))
        vals.append(v)
        rep.add("IN<=I", N, exact, v, math.inf)
    for N, lo, hi in zip(N_list[1:], vals[:-1], vals[1:]):
        rep.add("IN<=I2N", N, hi, lo, math.inf)
    return rep


def martingale_sweep(mu, nu, cost, N, Nprime_list, grid_points=40, tol=LP_TOL):
    """Values with martingale test functions Hat(N') for nested N' on a
    fixed grid; stored as ``I^{N,N'_k} - I^{N,N'_{k-1}} >= 0`` rows.

    The grid LP is an upper proxy of each value; on a common grid the
    nesting of the constraint sets makes the chain monotone exactly.
    """
    Nprime_list = list(Nprime_list)
    fx, fy = RegularizedPosPart(N), RegularizedPosPart(N)
    t = (moments(fx, mu).values, moments(fy, nu).values)
    grid = _grid(max([N] + Nprime_list), grid_points)
    rep = RateReport("martingale_sweep", tol, metadata={"N": N})
    prev = None
    for Np in Nprime_list:
        v = grid_lp_value(cost, (fx, fy), t, grid, martingale_family(Np, (0.0, 1.0)))
        if prev is not None:
            rep.add("INN'<=INN'next", Np, v, prev, math.inf)
        prev = v
    rep.metadata["last_value"] = prev
    return rep


# ---------------------------------------------------------------------------
# oracles and fixtures


def bundled_pair():
    """The reference pair with densities 3x^2 and 2 - 2y."""
    return Marginal1D.poly([0.0, 0.0, 3.0]), Marginal1D.poly([2.0, -2.0])


def gaussian_pair():
    mu = GaussianMarginal2D(np.zeros(2), np.eye(2))
    nu = GaussianMarginal2D(np.ones(2), np.array([[1.0, 0.7], [0.7, 1.0]]))
    return mu, nu


def compute_oracles():
    """Derived reference values, each with the method and tolerance used to
    pin it."""
    mu, nu = bundled_pair()
    out = {}

    def put(name, value, method, tol):
        out[name] = {"value": float(value), "method": method, "tolerance": tol}

    put("w1_bundled", wasserstein_1d(mu, nu, 1), "piecewise exact CDF-difference integral", 1e-9)
    put("w2sq_bundled", wasserstein_1d(mu, nu, 2), "graded Gauss-Legendre quantile quadrature", 1e-9)
    put("bures_gaussian", bures_gaussian_cost(*gaussian_pair()), "eigendecomposition", 1e-6)
    put("martingale_uniform_cubic", (1.0 / 16.0) ** 1.5, "variance identity and Jensen bound", 1e-12)
    put("w1_identical", wasserstein_1d(mu, mu, 1), "piecewise exact CDF-difference integral", 1e-12)
    for N in (4,):
        for tag, law in (("mu", mu), ("nu", nu)):
            for m, v in enumerate(cell_masses(law, N), start=1):
                put(f"cell_mass_{tag}_N{N}_m{m}", v, "closed-form CDF", 1e-12)
    for N in (5, 10, 20, 40):
        J, _ = transport_lp(cell_masses(mu, N), cell_masses(nu, N),
                            _midpoint_costs(N, CostFunction.power(1)))
        put(f"midpoint_cell_value_p1_N{N}", J, "transport LP", 1e-9)
    lp, nw = cell_problem_optimum(CellProblem.from_marginals(mu, nu, 20, CostFunction.power(2)))
    put("corner_cell_value_p2_N20", lp, "transport LP, equal to the monotone coupling", 1e-9)
    return out


def check_fixtures(fixtures, fresh=None, drift=1e-9):
    """Compare pinned fixtures with freshly computed oracles.

    Returns the list of names whose values moved by more than ``drift``.
    """
    fresh = compute_oracles() if fresh is None else fresh
    bad = []
    for name, entry in fixtures.items():
        if name not in fresh or abs(fresh[name]["value"] - entry["value"]) > drift:
            bad.append(name)
    return bad


def load_fixtures(path=None):
    if path is None:
        from importlib import resources
        text = resources.files("mcot").joinpath("data/fixtures.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return json.loads(text)
