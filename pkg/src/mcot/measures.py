"""One-dimensional probability laws, CDF machinery and exact transport oracles.

Every law lives on [0, 1]. Absolutely continuous laws carry a piecewise
polynomial density, so CDFs and CDF integrals are exact polynomial
antiderivatives. Discrete laws are stored as sorted atoms with merged ties.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial

__all__ = [
    "Marginal1D",
    "DiscreteMeasure",
    "GaussianMarginal2D",
    "cdf",
    "inverse_cdf",
    "cdf_integral",
    "cell_masses",
    "wasserstein_1d",
    "wasserstein_distance",
    "wasserstein_pp_cdf_form",
    "hat_atoms",
    "hat_measure",
    "bures_gaussian_cost",
    "gaussian_transport_matrix",
    "marginal_from_spec",
    "write_empirical_csv",
    "read_empirical_csv",
    "real_roots_in",
]

_MASS_TOL = 1e-12
_GL_ORDER = 10


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of an operation."""


def _knot_round(v):
    # Collapse float noise such as 0.7 * 10 = 7.000000000000001 onto the knot.
    return np.round(v, 12)


class Marginal1D:
    """A probability law on [0, 1].

    Use the constructors :meth:`poly`, :meth:`piecewise_poly`,
    :meth:`uniform` and :meth:`empirical` rather than calling the class
    directly.

    Attributes
    ----------
    kind : str
        ``"poly"``, ``"uniform"`` or ``"empirical"``.
    """

    def __init__(self, kind, *, breaks=None, densities=None, atoms=None,
                 weights=None, label=None):
        self.kind = kind
        self.label = label or kind
        if kind == "empirical":
            self._init_empirical(atoms, weights)
        else:
            self._init_pieces(breaks, densities)

    # construction -------------------------------------------------------
    @classmethod
    def poly(cls, coeffs, label=None):
        """Density ``sum_k coeffs[k] x**k`` on [0, 1]."""
        return cls("poly", breaks=[0.0, 1.0], densities=[list(coeffs)],
                   label=label or f"poly{list(map(float, coeffs))}")

    @classmethod
    def piecewise_poly(cls, breaks, coeffs_list, label=None):
        """Density given by one power-basis polynomial per interval.

        Parameters
        ----------
        breaks : sequence of float
            Increasing breakpoints from 0 to 1.
        coeffs_list : sequence
            For each of the ``len(breaks) - 1`` intervals, power-basis
            coefficients in the absolute variable x, or a
            ``numpy.polynomial.Polynomial`` (its domain and window are kept,
            which is better conditioned on short intervals).
        """
        return cls("poly", breaks=breaks, densities=coeffs_list,
                   label=label or "piecewise-poly")

    @classmethod
    def uniform(cls, a=0.0, b=1.0):
        """Uniform law on [a, b] with 0 <= a < b <= 1."""
        a, b = float(a), float(b)
        if not (0.0 <= a < b <= 1.0):
            raise DomainError(f"uniform support [{a}, {b}] must lie in [0, 1]")
        brk = [0.0, a, b, 1.0]
        dens = [[0.0], [1.0 / (b - a)], [0.0]]
        keep = [i for i in range(3) if brk[i + 1] > brk[i]]
        breaks = [brk[keep[0]]] + [brk[i + 1] for i in keep]
        m = cls("uniform", breaks=breaks, densities=[dens[i] for i in keep],
                label=f"uniform[{a},{b}]")
        m.a, m.b = a, b
        return m

    @classmethod
    def empirical(cls, atoms, weights=None, label=None):
        """Discrete law ``sum_k w_k delta_{x_k}``; ties are merged."""
        atoms = np.asarray(atoms, dtype=float).ravel()
        if weights is None:
            weights = np.full(atoms.size, 1.0 / atoms.size)
        return cls("empirical", atoms=atoms, weights=weights,
                   label=label or "empirical")

    def _init_pieces(self, breaks, densities):
        breaks = np.asarray(breaks, dtype=float)
        if breaks[0] != 0.0 or breaks[-1] != 1.0 or np.any(np.diff(breaks) <= 0):
            raise DomainError("breakpoints must increase from 0 to 1")
        if len(densities) != breaks.size - 1:
            raise DomainError("need one density polynomial per interval")
        self.breaks = breaks
        self.rho = [c if isinstance(c, Polynomial) else Polynomial(np.asarray(c, dtype=float))
                    for c in densities]
        cdfs, ints = [], []
        offset, ioffset = 0.0, 0.0
        for k, rho in enumerate(self.rho):
            lo, hi = breaks[k], breaks[k + 1]
            _check_nonnegative(rho, lo, hi)
            anti = rho.integ()
            F = anti - anti(lo) + offset
            G = F.integ()
            G = G - G(lo) + ioffset
            cdfs.append(F)
            ints.append(G)
            offset, ioffset = F(hi), G(hi)
        if abs(offset - 1.0) > _MASS_TOL:
            raise DomainError(f"density integrates to {offset!r}, not 1")
        self.F = cdfs
        self.G = ints
        self.support_left = self._support_left()

    def _init_empirical(self, atoms, weights):
        w = np.asarray(weights, dtype=float).ravel()
        if atoms.size == 0 or atoms.size != w.size:
            raise DomainError("atoms and weights must be non-empty and aligned")
        if np.any(atoms < 0.0) or np.any(atoms > 1.0):
            raise DomainError("atoms must lie in [0, 1]")
        if np.any(w < 0.0):
            raise DomainError("weights must be non-negative")
        if abs(w.sum() - 1.0) > _MASS_TOL:
            raise DomainError(f"weights sum to {w.sum()!r}, not 1")
        order = np.argsort(atoms, kind="stable")
        atoms, w = atoms[order], w[order]
        uniq, inv = np.unique(atoms, return_inverse=True)
        merged = np.zeros(uniq.size)
        np.add.at(merged, inv, w)
        keep = merged > 0.0
        self.atoms = uniq[keep]
        self.weights = merged[keep]
        self.cumw = np.cumsum(self.weights)
        self.cumw[-1] = 1.0
        self.support_left = float(self.atoms[0])

    def _support_left(self):
        for k, rho in enumerate(self.rho):
            lo, hi = self.breaks[k], self.breaks[k + 1]
            if self.F[k](hi) > self.F[k](lo):
                return float(lo) if _positive_near_left(rho, lo, hi) else float(
                    _bisect_first(lambda x: self._cdf(x) > self.F[k](lo), lo, hi))
        return 0.0

    # evaluation ---------------------------------------------------------
    @property
    def is_discrete(self):
        return self.kind == "empirical"

    def _piece(self, x):
        return np.clip(np.searchsorted(self.breaks, x, side="right") - 1,
                       0, len(self.rho) - 1)

    def _cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.is_discrete:
            idx = np.searchsorted(self.atoms, x, side="right")
            return np.where(idx > 0, self.cumw[np.maximum(idx - 1, 0)], 0.0)
        out = np.empty(x.shape)
        piece = self._piece(x)
        for k in np.unique(piece):
            sel = piece == k
            out[sel] = self.F[k](x[sel])
        return np.clip(out, 0.0, 1.0)

    def cdf(self, x):
        """Return F(x) = mu([0, x]) for x in [0, 1]."""
        xa = np.asarray(x, dtype=float)
        if np.any(xa < 0.0) or np.any(xa > 1.0) or np.any(np.isnan(xa)):
            raise DomainError("cdf argument outside [0, 1]")
        val = self._cdf(xa)
        return float(val) if np.ndim(x) == 0 else val

    def density(self, x):
        """Density values (absolutely continuous laws only)."""
        if self.is_discrete:
            raise DomainError("empirical laws have no density")
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape)
        piece = self._piece(x)
        for k in np.unique(piece):
            sel = piece == k
            out[sel] = self.rho[k](x[sel])
        return out

    def cdf_integral(self, a, b):
        """Return the integral of F over [a, b] for 0 <= a <= b <= 1."""
        if not (0.0 <= a <= b <= 1.0):
            raise DomainError("integration bounds must satisfy 0 <= a <= b <= 1")
        if self.is_discrete:
            return float(np.sum(self.weights * np.maximum(0.0, b - np.maximum(a, self.atoms))))
        return float(self._G(b) - self._G(a))

    def _G(self, x):
        k = int(self._piece(np.asarray(x)))
        return self.G[k](x)

    def inverse_cdf(self, u):
        """Generalized inverse ``inf{x : F(x) >= u}``; ``u = 0`` maps to the
        left end of the support."""
        ua = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        if self.is_discrete:
            idx = np.searchsorted(self.cumw, ua, side="left")
            val = self.atoms[np.clip(idx, 0, self.atoms.size - 1)]
        else:
            # first piece whose right-end CDF reaches u, then bisect its
            # (monotone) CDF polynomial on that piece alone
            ends = self._cdf(self.breaks[1:])
            piece = np.minimum(np.searchsorted(ends, ua, side="left"), len(self.F) - 1)
            val = np.empty(ua.shape)
            for k in np.unique(piece):
                sel = piece == k
                target, F = ua[sel], self.F[k]
                val[sel] = _bisect_first(lambda x: F(x) >= target,
                                         self.breaks[k], self.breaks[k + 1],
                                         shape=target.shape)
            val = np.where(ua <= 0.0, self.support_left, val)
        return float(val) if np.ndim(u) == 0 else val

    def quantile_breaks(self):
        """u-values where the quantile function may be non-smooth."""
        if self.is_discrete:
            return self.cumw[:-1].copy()
        return self._cdf(self.breaks[1:-1])

    def cdf_breaks(self):
        """x-values where the CDF may be non-smooth."""
        if self.is_discrete:
            return self.atoms.copy()
        return self.breaks[1:-1].copy()

    def max_density(self):
        """Sup norm of the density (closed form over critical points)."""
        best = 0.0
        for k, rho in enumerate(self.rho):
            lo, hi = self.breaks[k], self.breaks[k + 1]
            pts = [lo, hi] + real_roots_in(rho.deriv(), lo, hi)
            best = max(best, max(abs(rho(t)) for t in pts))
        return float(best)

    def max_density_slope(self):
        """Sup norm of the density derivative, i.e. of F''."""
        best = 0.0
        for k, rho in enumerate(self.rho):
            lo, hi = self.breaks[k], self.breaks[k + 1]
            d = rho.deriv()
            pts = [lo, hi] + real_roots_in(d.deriv(), lo, hi)
            best = max(best, max(abs(d(t)) for t in pts))
        return float(best)

    def to_discrete(self):
        """The law as a one-dimensional :class:`DiscreteMeasure`."""
        if not self.is_discrete:
            raise DomainError("only empirical laws convert to discrete measures")
        return DiscreteMeasure(self.atoms[:, None], self.weights)

    def __repr__(self):
        return f"Marginal1D({self.label})"


def real_roots_in(poly, lo, hi, closed=True, imag_tol=1e-12):
    """Real roots of ``poly`` in [lo, hi] (or (lo, hi) if not ``closed``).

    Trailing coefficients below 1e-14 of the largest are dropped first, so a
    denormal leading term does not blow up the companion matrix.
    """
    scale = float(np.max(np.abs(poly.coef)))
    if scale == 0.0:
        return []
    q = poly.trim(1e-14 * scale)
    if q.degree() < 1:
        return []
    inside = (lambda r: lo <= r <= hi) if closed else (lambda r: lo < r < hi)
    return [r.real for r in q.roots() if abs(r.imag) < imag_tol and inside(r.real)]


def _check_nonnegative(rho, lo, hi):
    pts = [lo, hi] + real_roots_in(rho.deriv(), lo, hi)
    if min(rho(t) for t in pts) < -1e-12:
        raise DomainError("density takes negative values")


def _positive_near_left(rho, lo, hi):
    return rho(lo + 1e-9 * (hi - lo)) > 0.0


def _bisect_first(pred, lo, hi, shape=(), iters=64):
    """Vectorised bisection for the smallest x in [lo, hi] with pred(x) true,
    assuming pred is monotone (false then true)."""
    a = np.full(shape, float(lo))
    b = np.full(shape, float(hi))
    for _ in range(iters):
        mid = 0.5 * (a + b)
        ok = pred(mid)
        b = np.where(ok, mid, b)
        a = np.where(ok, a, mid)
    return b


# ---------------------------------------------------------------------------
# functional interface


def cdf(m, x):
    """F(x) for x in [0, 1]; raises :class:`DomainError` outside."""
    return m.cdf(x)


def inverse_cdf(m, u):
    """Generalized inverse CDF, clamped to u in [0, 1]."""
    return m.inverse_cdf(u)


def cdf_integral(m, a, b):
    """Integral of the CDF of ``m`` over [a, b]."""
    return m.cdf_integral(a, b)


def cell_masses(m, N):
    """Masses mu(T_m) of the cells T_1 = [0, 1/N], T_m = ((m-1)/N, m/N].

    Examples
    --------
    >>> cell_masses(Marginal1D.uniform(), 2)
    array([0.5, 0.5])
    """
    if N < 1:
        raise DomainError("N must be positive")
    knots = np.arange(N + 1) / N
    F = m._cdf(knots)
    out = np.diff(F)
    out[0] += F[0]
    return out


# ---------------------------------------------------------------------------
# transport oracles


def _unit_rule(panels, graded):
    x, w = _gl_panels(0.0, 1.0, panels, graded)
    return x, w


def _gl_panels(a, b, panels, graded):
    """Composite Gauss-Legendre nodes/weights on [a, b].

    With ``graded`` the panels live in a variable t mapped through the
    quintic smoothstep, which flattens algebraic endpoint singularities.
    """
    x0, w0 = _LEG_X, _LEG_W
    edges = np.linspace(0.0, 1.0, panels + 1)
    half = 0.5 * np.diff(edges)
    t = (edges[:-1, None] + half[:, None] * (x0[None, :] + 1.0)).ravel()
    wt = (half[:, None] * w0[None, :]).ravel()
    if graded:
        s = t ** 3 * (10.0 - 15.0 * t + 6.0 * t ** 2)
        ds = 30.0 * t ** 2 * (1.0 - t) ** 2
    else:
        s, ds = t, np.ones_like(t)
    return a + (b - a) * s, (b - a) * ds * wt


_LEG_X, _LEG_W = np.polynomial.legendre.leggauss(_GL_ORDER)
_GL_NODES, _GL_WEIGHTS = _unit_rule(1, False)
_GRADED_NODES, _GRADED_WEIGHTS = _unit_rule(8, True)


def _split_panels(edges, total):
    lengths = np.diff(edges)
    counts = np.maximum(1, np.round(total * lengths / lengths.sum()).astype(int))
    return counts


def _empirical_wpp(mu, nu, p):
    u = np.union1d(mu.cumw, nu.cumw)
    u = np.concatenate(([0.0], u[u < 1.0], [1.0]))
    u = np.unique(u)
    mid = 0.5 * (u[:-1] + u[1:])
    qa = mu.inverse_cdf(mid)
    qb = nu.inverse_cdf(mid)
    return float(np.sum(np.diff(u) * np.abs(qa - qb) ** p))


def _mixed_wpp(cont, emp, p):
    # Atom k is matched to the slab [F^{-1}(u_{k-1}), F^{-1}(u_k)] of the
    # continuous law; substituting t = F^{-1}(u) gives
    # int |t - x_k|**p rho(t) dt, polynomial on each side of x_k.
    u = np.clip(np.concatenate(([0.0], emp.cumw)), 0.0, 1.0)
    t = np.asarray(cont.inverse_cdf(u), dtype=float)
    t[0], t[-1] = 0.0, 1.0
    inner = cont.breaks[1:-1]
    lo_all, hi_all, at_all = [], [], []
    for k, x in enumerate(emp.atoms):
        lo, hi = t[k], t[k + 1]
        if hi <= lo:
            continue
        edges = np.concatenate(([lo, hi], inner[(inner > lo) & (inner < hi)]))
        if lo < x < hi:
            edges = np.append(edges, x)
        edges = np.unique(edges)
        lo_all.append(edges[:-1])
        hi_all.append(edges[1:])
        at_all.append(np.full(edges.size - 1, x))
    if not lo_all:
        return 0.0
    a, b, x = (np.concatenate(v)[:, None] for v in (lo_all, hi_all, at_all))
    if float(p).is_integer():
        # order-10 Gauss-Legendre is exact up to degree 19
        s, w = _GL_NODES, _GL_WEIGHTS
    else:
        s, w = _GRADED_NODES, _GRADED_WEIGHTS
    xs = a + (b - a) * s[None, :]
    f = np.abs(xs - x) ** p * cont.density(xs.ravel()).reshape(xs.shape)
    return float(np.sum((b - a) * (f @ w)[:, None]))


def _cdf_pieces(m, a, b):
    """The CDF of ``m`` restricted to [a, b] as a Polynomial (constant for
    empirical laws); [a, b] must not contain an interior breakpoint."""
    mid = 0.5 * (a + b)
    if m.is_discrete:
        return Polynomial([float(m._cdf(np.asarray(mid)))])
    return m.F[int(m._piece(np.asarray(mid)))]


def _w1_cdf_form(mu, nu, panels):
    edges = np.unique(np.concatenate(([0.0, 1.0], mu.cdf_breaks(), nu.cdf_breaks())))
    edges = edges[(edges >= 0.0) & (edges <= 1.0)]
    pieces = []
    for a, b in zip(edges[:-1], edges[1:]):
        # both pieces in the local variable of [a, b], whatever their basis
        diff = _cdf_pieces(mu, a, b).convert(domain=[a, b]) \
            - _cdf_pieces(nu, a, b).convert(domain=[a, b])
        cuts = [a] + real_roots_in(diff, a, b, closed=False) + [b]
        cuts = np.sort(np.array(cuts))
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            if hi > lo:
                pieces.append((lo, hi, diff))
    total = 0.0
    x0, w0 = np.polynomial.legendre.leggauss(_GL_ORDER)
    for lo, hi, diff in pieces:
        # |diff| is a single polynomial of known sign here; Gauss-Legendre
        # of order 10 is exact up to degree 19.
        xs = 0.5 * (hi - lo) * (x0 + 1.0) + lo
        total += 0.5 * (hi - lo) * np.dot(w0, np.abs(diff(xs)))
    return float(total)


def wasserstein_1d(mu, nu, p=1.0, quadrature_nodes=256):
    """Return W_p(mu, nu)**p for laws on [0, 1].

    Parameters
    ----------
    mu, nu : Marginal1D
    p : float
        Order, at least 1.
    quadrature_nodes : int
        Number of composite Gauss-Legendre panels (at least 64).

    Returns
    -------
    float
        ``int_0^1 |F_mu^{-1}(u) - F_nu^{-1}(u)|**p du``. Two empirical laws
        are handled exactly by merging quantile breakpoints, and a continuous
        law against an empirical one by integrating over the slab each atom
        receives. Otherwise for ``p = 1``
        the CDF form ``int |F_mu - F_nu|`` is integrated piecewise exactly.
    """
    if p < 1.0:
        raise DomainError("order p must be at least 1")
    if quadrature_nodes < 64:
        raise DomainError("quadrature_nodes must be at least 64")
    if mu.is_discrete and nu.is_discrete:
        return _empirical_wpp(mu, nu, p)
    if mu.is_discrete != nu.is_discrete:
        cont, emp = (nu, mu) if mu.is_discrete else (mu, nu)
        return _mixed_wpp(cont, emp, p)
    if p == 1.0:
        return _w1_cdf_form(mu, nu, quadrature_nodes)
    edges = np.unique(np.concatenate(([0.0, 1.0], mu.quantile_breaks(),
                                      nu.quantile_breaks())))
    edges = edges[(edges >= 0.0) & (edges <= 1.0)]
    counts = _split_panels(edges, quadrature_nodes)
    total = 0.0
    for (a, b), n in zip(zip(edges[:-1], edges[1:]), counts):
        if b <= a:
            continue
        u, w = _gl_panels(a, b, int(n), graded=True)
        total += np.dot(w, np.abs(mu.inverse_cdf(u) - nu.inverse_cdf(u)) ** p)
    return float(total)


def wasserstein_distance(mu, nu, p=1.0, quadrature_nodes=256):
    """W_p(mu, nu), the p-th root of :func:`wasserstein_1d`."""
    return wasserstein_1d(mu, nu, p, quadrature_nodes) ** (1.0 / p)


def wasserstein_pp_cdf_form(mu, nu, p=2.0, grid=512):
    """W_p(mu, nu)**p from the double-integral CDF representation.

    Evaluates ``p (p-1) iint_{x<y} ([G(x)-F(y)]^+ + [F(x)-G(y)]^+) (y-x)**(p-2)``
    with a midpoint rule on a ``grid x grid`` tensor mesh of [0, 1]^2.
    Diagonal cells get half weight. This is a slow cross-check of
    :func:`wasserstein_1d`, not a fast path.
    """
    if p <= 1.0:
        raise DomainError("the CDF form needs p > 1")
    h = 1.0 / grid
    x = (np.arange(grid) + 0.5) * h
    F = mu._cdf(x)
    G = nu._cdf(x)
    X, Y = np.meshgrid(x, x, indexing="ij")
    gap = Y - X
    w = np.where(gap > 0, 1.0, 0.0)
    np.fill_diagonal(w, 0.5)
    kern = np.zeros_like(gap)
    pos = w > 0
    if p == 2.0:
        kern[pos] = 1.0
    else:
        # The diagonal midpoint has gap 0; use the cell-averaged gap instead.
        g = np.where(gap > 0, gap, h / 3.0)
        kern[pos] = g[pos] ** (p - 2.0)
    integrand = (np.maximum(G[:, None] - F[None, :], 0.0)
                 + np.maximum(F[:, None] - G[None, :], 0.0))
    return float(p * (p - 1.0) * h * h * np.sum(w * kern * integrand))


# ---------------------------------------------------------------------------
# hat measure


def hat_atoms(mu, N):
    """Atom positions and weights of the hat measure, zero weights included.

    Returns arrays of length N + 1: an atom at 0 carrying F(0), then one
    atom x_m in each cell T_m carrying F(m/N) - F((m-1)/N). The position
    solves ``(x - a) F(a) + (b - x) F(b) = int_a^b F`` with a = (m-1)/N,
    b = m/N; a cell of zero mass gets x_m = b.
    """
    knots = np.arange(N + 1) / N
    F = mu._cdf(knots)
    xs = np.empty(N + 1)
    ws = np.empty(N + 1)
    xs[0], ws[0] = 0.0, F[0]
    for m in range(1, N + 1):
        a, b = knots[m - 1], knots[m]
        dF = F[m] - F[m - 1]
        ws[m] = dF
        if dF <= 0.0:
            xs[m] = b
        else:
            xm = (b * F[m] - a * F[m - 1] - mu.cdf_integral(a, b)) / dF
            xs[m] = min(max(xm, a), b)
    return xs, ws


def hat_measure(mu, N):
    """The hat measure of ``mu`` on the uniform grid of step 1/N.

    It matches ``F(m/N)`` and ``int_{T_m} F`` for every cell, hence all
    moments against continuous piecewise affine functions with knots k/N.

    Examples
    --------
    >>> hat_measure(Marginal1D.uniform(), 1).atoms
    array([0.5])
    """
    xs, ws = hat_atoms(mu, N)
    keep = ws > 0.0
    ws = ws[keep] / ws[keep].sum()
    return Marginal1D.empirical(xs[keep], ws, label=f"hat({mu.label},N={N})")


# ---------------------------------------------------------------------------
# Gaussian laws in the plane


@dataclass(frozen=True)
class GaussianMarginal2D:
    """A normal law on R^2."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(2)
        cov = np.asarray(self.cov, dtype=float).reshape(2, 2)
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise DomainError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0.0:
            raise DomainError("covariance must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


def _sqrtm_spd(S):
    lam, V = np.linalg.eigh(S)
    if lam.min() < 0.0:
        lam = np.maximum(lam, 0.0)
    return (V * np.sqrt(lam)) @ V.T


def bures_gaussian_cost(mu, nu):
    """Quadratic transport cost between two planar Gaussians.

    ``|m_mu - m_nu|^2 + Tr(S_mu + S_nu - 2 (S_mu^1/2 S_nu S_mu^1/2)^1/2)``
    """
    r = _sqrtm_spd(mu.cov)
    cross = _sqrtm_spd(r @ nu.cov @ r)
    d = mu.mean - nu.mean
    return float(d @ d + np.trace(mu.cov + nu.cov - 2.0 * cross))


def gaussian_transport_matrix(mu, nu):
    """Matrix A of the optimal affine map x -> m_nu + A (x - m_mu)."""
    r = _sqrtm_spd(mu.cov)
    rinv = np.linalg.inv(r)
    return rinv @ _sqrtm_spd(r @ nu.cov @ r) @ rinv


# ---------------------------------------------------------------------------
# discrete measures in R^D


@dataclass(frozen=True)
class DiscreteMeasure:
    """``sum_k w_k delta_{z_k}`` with points z_k in R^D.

    Attributes
    ----------
    points : ndarray, shape (K, D)
    weights : ndarray, shape (K,)
    """

    points: np.ndarray
    weights: np.ndarray
    tol: float = field(default=_MASS_TOL, repr=False, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float).ravel()
        if pts.shape[0] != w.size or w.size == 0:
            raise DomainError("points and weights must be non-empty and aligned")
        if np.any(w < 0.0):
            raise DomainError("weights must be non-negative")
        if abs(w.sum() - 1.0) > self.tol:
            raise DomainError(f"weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def size(self):
        return self.weights.size

    @property
    def dim(self):
        return self.points.shape[1]

    def integrate(self, f):
        """``sum_k w_k f(z_k)`` for f mapping (K, D) -> (K, ...)."""
        vals = np.asarray(f(self.points), dtype=float)
        return np.tensordot(self.weights, vals, axes=(0, 0))

    def to_csv(self):
        """CSV text with header ``w,x1,...,xD``."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["w"] + [f"x{i + 1}" for i in range(self.dim)])
        for w, z in zip(self.weights, self.points):
            wr.writerow([_fmt(w)] + [_fmt(v) for v in z])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
        return cls(data[:, 1:], data[:, 0])


def _fmt(v):
    return repr(float(v))


def write_empirical_csv(m):
    """Serialise an empirical law as CSV text with header ``x,weight``."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["x", "weight"])
    for x, w in zip(m.atoms, m.weights):
        wr.writerow([_fmt(x), _fmt(w)])
    return buf.getvalue()


def read_empirical_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    if rows[0] != ["x", "weight"]:
        raise DomainError("expected header x,weight")
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    return Marginal1D.empirical(data[:, 0], data[:, 1])


def marginal_from_spec(spec):
    """Build a marginal from its JSON description.

    Recognised kinds: ``{"kind": "poly", "coeffs": [...]}``,
    ``{"kind": "piecewise_poly", "breaks": [...], "coeffs": [[...], ...]}``,
    ``{"kind": "uniform", "a": .., "b": ..}``,
    ``{"kind": "empirical", "atoms": [...], "weights": [...]}`` and
    ``{"kind": "gaussian2d", "mean": [..], "cov": [[..], [..]]}``.
    """
    kind = spec["kind"]
    if kind == "poly":
        return Marginal1D.poly(spec["coeffs"])
    if kind == "piecewise_poly":
        return Marginal1D.piecewise_poly(spec["breaks"], spec["coeffs"])
    if kind == "uniform":
        return Marginal1D.uniform(spec.get("a", 0.0), spec.get("b", 1.0))
    if kind == "empirical":
        return Marginal1D.empirical(spec["atoms"], spec.get("weights"))
    if kind == "gaussian2d":
        return GaussianMarginal2D(np.array(spec["mean"]), np.array(spec["cov"]))
    raise DomainError(f"unknown marginal kind {kind!r}")
