"""Test-function families and their moments against one-dimensional laws.

A family is evaluated in batch: ``values(x)`` returns a ``(K, n)`` matrix
whose column ``j`` is the j-th function at the K points. Points are given
in the family's domain box and mapped affinely onto the reference cell
[0, 1] (or [0, 1]^2), where the grid of step 1/N lives.

Cells follow the convention T_1 = [0, 1/N], T_m = ((m-1)/N, m/N].
All functions vanish outside the domain box.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

__all__ = [
    "UnsupportedOperationError",
    "TestFamily",
    "PiecewiseConstant",
    "Hat",
    "AffinePair",
    "RegularizedPosPart",
    "Mesh2D",
    "FunctionFamily",
    "MomentVector",
    "evaluate",
    "evaluate_derivative",
    "moments",
    "gaussian_moments",
    "martingale_family",
    "family_from_spec",
    "smooth_pos",
]


class UnsupportedOperationError(Exception):
    """The family does not provide the requested operation."""


def _cell_index(u, N):
    # 1-based index of the cell containing u, T_1 closed at 0.
    return np.clip(np.ceil(np.round(u * N, 12)), 1, N).astype(int)


def _right_piece(u, N):
    # 0-based index of the piece [k/N, (k+1)/N) to the right of u.
    return np.clip(np.floor(np.round(u * N, 12)), 0, N - 1).astype(int)


def smooth_pos(t, eps):
    """C^1 positive part: 0, (t + eps)^2 / (4 eps), t on the three branches."""
    t = np.asarray(t, dtype=float)
    return np.where(t <= -eps, 0.0,
                    np.where(t >= eps, t, (t + eps) ** 2 / (4.0 * eps)))


def smooth_pos_deriv(t, eps):
    t = np.asarray(t, dtype=float)
    return np.where(t <= -eps, 0.0,
                    np.where(t >= eps, 1.0, (t + eps) / (2.0 * eps)))


class TestFamily:
    """Base class. Subclasses set ``kind``, ``N``, ``size``, ``dim`` and
    implement ``_values``/``_derivs`` on reference coordinates.

    Families with ``length_scaled = True`` are positive-part type functions
    of slope one; on a box of width L they return ``L * phi(u)`` so the
    slope stays one in physical units. Other families keep their values.
    """

    __test__ = False  # keep pytest from collecting this class
    kind = "abstract"
    dim = 1
    differentiable = False
    length_scaled = False

    @property
    def _vscale(self):
        return self.hi - self.lo if self.length_scaled else 1.0

    def __init__(self, N, domain=(0.0, 1.0)):
        if int(N) < 1:
            raise ValueError("N must be a positive integer")
        self.N = int(N)
        lo, hi = domain
        self.lo = float(lo)
        self.hi = float(hi)
        if not self.hi > self.lo:
            raise ValueError("domain box must have positive width")

    @property
    def name(self):
        return f"{self.kind}(N={self.N})"

    def indices(self):
        return list(range(1, self.size + 1))

    def position(self, index):
        """Column of ``index`` in the output of :meth:`values`."""
        try:
            return self.indices().index(index)
        except ValueError:
            raise IndexError(f"index {index!r} not valid for {self.name}") from None

    def _ref(self, x):
        x = np.asarray(x, dtype=float)
        if self.dim == 1:
            x = x.reshape(-1)
        else:
            x = x.reshape(-1, self.dim)
        u = (x - self.lo) / (self.hi - self.lo)
        inside = (u >= -1e-12) & (u <= 1.0 + 1e-12)
        if self.dim > 1:
            inside = np.all(inside, axis=1)
        return np.clip(u, 0.0, 1.0), inside

    def values(self, x):
        """Function values, shape (K, size)."""
        u, inside = self._ref(x)
        return self._values(u) * (inside[:, None] * self._vscale)

    def derivatives(self, x):
        """Derivatives, shape (K, size) in 1D or (K, size, dim) in 2D."""
        u, inside = self._ref(x)
        scale = self._vscale / (self.hi - self.lo)
        d = self._derivs(u) * scale
        if self.dim == 1:
            return d * inside[:, None]
        return d * inside[:, None, None]

    def breakpoints(self):
        """Reference-coordinate points where the functions are not smooth."""
        return np.arange(self.N + 1) / self.N

    def spec(self):
        return {"family": self.kind, "N": self.N}


class PiecewiseConstant(TestFamily):
    """Cell indicators 1_{T_m}, m = 1..N."""

    kind = "pwc"

    @property
    def size(self):
        return self.N

    def _values(self, u):
        c = _cell_index(u, self.N)
        return (c[:, None] == np.arange(1, self.N + 1)[None, :]).astype(float)

    def _derivs(self, u):
        raise UnsupportedOperationError(f"{self.name} has no derivative")


class Hat(TestFamily):
    """Continuous hats psi_m, m = 1..N, with psi_m(k/N) = delta_{mk} for k >= 1."""

    kind = "hat"

    @property
    def size(self):
        return self.N

    def _values(self, u):
        m = np.arange(1, self.N + 1)[None, :]
        return np.maximum(0.0, 1.0 - np.abs(self.N * u[:, None] - m))

    def _derivs(self, u):
        k = _right_piece(u, self.N)[:, None]
        m = np.arange(1, self.N + 1)[None, :]
        return np.where(k == m - 1, float(self.N),
                        np.where(k == m, -float(self.N), 0.0))


class AffinePair(TestFamily):
    """phi_{m,1} = N(x - (m-1)/N) and phi_{m,2} = 1 - phi_{m,1} on T_m, zero
    elsewhere. Indices are pairs (m, leg), ordered m-major."""

    kind = "affine"

    @property
    def size(self):
        return 2 * self.N

    def indices(self):
        return [(m, leg) for m in range(1, self.N + 1) for leg in (1, 2)]

    def _values(self, u):
        c = _cell_index(u, self.N)
        t = self.N * u - (c - 1)
        out = np.zeros((u.size, 2 * self.N))
        rows = np.arange(u.size)
        out[rows, 2 * (c - 1)] = t
        out[rows, 2 * (c - 1) + 1] = 1.0 - t
        return out

    def _derivs(self, u):
        c = _right_piece(u, self.N) + 1
        out = np.zeros((u.size, 2 * self.N))
        rows = np.arange(u.size)
        out[rows, 2 * (c - 1)] = self.N
        out[rows, 2 * (c - 1) + 1] = -self.N
        return out


class RegularizedPosPart(TestFamily):
    """C^1 regularised positive parts phi_0, ..., phi_N.

    phi_m(x) smooths (x - (m-1)/N)^+ for m >= 1 and phi_0(x) smooths
    (1/N - x)^+, each with a quadratic bridge on a band of half-width eps.
    """

    kind = "regpp"
    differentiable = True
    length_scaled = True

    def __init__(self, N, eps=None, domain=(0.0, 1.0)):
        super().__init__(N, domain)
        self.eps = 1e-2 / self.N if eps is None else float(eps)
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")

    @property
    def name(self):
        return f"regpp(N={self.N},eps={self.eps:g})"

    @property
    def size(self):
        return self.N + 1

    def indices(self):
        return list(range(0, self.N + 1))

    def _shifts(self, u):
        knots = np.arange(self.N) / self.N
        t = np.empty((u.size, self.N + 1))
        t[:, 0] = 1.0 / self.N - u
        t[:, 1:] = u[:, None] - knots[None, :]
        return t

    def _values(self, u):
        return smooth_pos(self._shifts(u), self.eps)

    def _derivs(self, u):
        d = smooth_pos_deriv(self._shifts(u), self.eps)
        d[:, 0] *= -1.0
        return d

    def breakpoints(self):
        knots = np.arange(self.N + 1) / self.N
        return np.unique(np.concatenate([knots - self.eps, knots, knots + self.eps]))

    def spec(self):
        return {"family": self.kind, "N": self.N, "eps": self.eps}


class FunctionFamily(TestFamily):
    """Explicit scalar functions, evaluated as given (no box mapping).

    Parameters
    ----------
    funcs : sequence of callable
        Vectorised maps from a point array (shape (K,) in 1D, (K, dim)
        otherwise) to values of shape (K,).
    derivs : sequence of callable, optional
        Matching derivatives; without them the family is not differentiable.
    domain : (float, float)
        May be infinite.
    """

    kind = "functions"

    def __init__(self, funcs, derivs=None, domain=(-np.inf, np.inf), dim=1, label="custom"):
        if not funcs:
            raise ValueError("need at least one function")
        self.funcs = tuple(funcs)
        self.derivs = tuple(derivs) if derivs is not None else None
        self.N = len(self.funcs)
        self.lo, self.hi = float(domain[0]), float(domain[1])
        if not self.hi > self.lo:
            raise ValueError("domain must have positive width")
        self.dim = int(dim)
        self.label = label
        self.differentiable = self.derivs is not None

    @property
    def name(self):
        return f"functions({self.label},n={self.N})"

    @property
    def size(self):
        return self.N

    def _points(self, x):
        x = np.asarray(x, dtype=float)
        return x.reshape(-1) if self.dim == 1 else x.reshape(-1, self.dim)

    def values(self, x):
        x = self._points(x)
        return np.column_stack([np.asarray(f(x), dtype=float).reshape(-1)
                                for f in self.funcs])

    def derivatives(self, x):
        if self.derivs is None:
            raise UnsupportedOperationError(f"{self.name} has no derivative")
        x = self._points(x)
        return np.stack([np.asarray(d(x), dtype=float).reshape(x.shape)
                         for d in self.derivs], axis=1)

    def breakpoints(self):
        return np.array([0.0, 1.0])

    def spec(self):
        return {"family": self.kind, "label": self.label, "n": self.N}


class Mesh2D(TestFamily):
    """Continuous piecewise affine functions on the diagonally split grid.

    For (m, n) in {0..N}^2 the function is a C^1 regularisation of
    ``(min(a, b))^+`` where ``a = x - (m-1)/N`` (or ``1/N - x`` if m = 0)
    and ``b = y - (n-1)/N`` (or ``1/N - y`` if n = 0). The minimum is
    written ``(a + b - |a - b|)/2`` and both the absolute value and the
    outer positive part are smoothed on a band of half-width eps.
    Functions are stored row-major in (m, n).
    """

    kind = "mesh2d"
    dim = 2
    differentiable = True
    length_scaled = True

    def __init__(self, N, eps=None, domain=(0.0, 1.0)):
        super().__init__(N, domain)
        self.eps = 1e-2 / self.N if eps is None else float(eps)

    @property
    def name(self):
        return f"mesh2d(N={self.N},eps={self.eps:g})"

    @property
    def size(self):
        return (self.N + 1) ** 2

    def indices(self):
        return [(m, n) for m in range(self.N + 1) for n in range(self.N + 1)]

    def _ab(self, u):
        N = self.N
        idx = np.arange(N + 1)
        # a depends on m only, b on n only; sign of the linear part.
        sa = np.where(idx == 0, -1.0, 1.0)
        off = np.where(idx == 0, 1.0 / N, (idx - 1) / N)
        a = sa[None, :] * (u[:, 0:1] - off[None, :])
        b = sa[None, :] * (u[:, 1:2] - off[None, :])
        return a, b, sa

    def _parts(self, u):
        a, b, sa = self._ab(u)
        A = a[:, :, None]
        B = b[:, None, :]
        diff = A - B
        absd = smooth_pos(diff, self.eps) + smooth_pos(-diff, self.eps)
        mn = 0.5 * (A + B - absd)
        return diff, mn, sa

    def _values(self, u):
        _, mn, _ = self._parts(u)
        return smooth_pos(mn, self.eps).reshape(u.shape[0], -1)

    def _derivs(self, u):
        diff, mn, sa = self._parts(u)
        eps = self.eps
        dabs = smooth_pos_deriv(diff, eps) - smooth_pos_deriv(-diff, eps)
        outer = smooth_pos_deriv(mn, eps)
        dx = 0.5 * (1.0 - dabs) * sa[None, :, None]
        dy = 0.5 * (1.0 + dabs) * sa[None, None, :]
        g = np.stack([outer * dx, outer * dy], axis=-1)
        return g.reshape(u.shape[0], -1, 2)

    def spec(self):
        return {"family": self.kind, "N": self.N, "eps": self.eps}


# ---------------------------------------------------------------------------


def evaluate(family, index, x):
    """Value of the function ``index`` of ``family`` at the point ``x``."""
    j = family.position(index)
    return float(family.values(np.asarray(x, dtype=float)[None, ...])[0, j])


def evaluate_derivative(family, index, x):
    """Derivative (gradient for planar families), right-hand at kinks."""
    j = family.position(index)
    d = family.derivatives(np.asarray(x, dtype=float)[None, ...])[0, j]
    return float(d) if family.dim == 1 else np.asarray(d)


@dataclass(frozen=True)
class MomentVector:
    """Target moments of one family against one law."""

    values: np.ndarray
    family: str
    marginal: str

    def __len__(self):
        return self.values.size

    def to_csv(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["index", "value"])
        for i, v in enumerate(self.values):
            wr.writerow([i, repr(float(v))])
        return buf.getvalue()


def moments(family, marginal):
    """Integrals of every function of ``family`` against ``marginal``.

    For piecewise polynomial densities the integrand is a polynomial between
    consecutive breakpoints of the family and the density, and a 16-point
    Gauss-Legendre rule on each such interval integrates it exactly.
    """
    if family.dim != 1:
        raise UnsupportedOperationError("moments() handles one-dimensional families")
    if marginal.is_discrete:
        vals = marginal.weights @ family.values(marginal.atoms)
        return MomentVector(np.asarray(vals, dtype=float), family.name, marginal.label)
    width = family.hi - family.lo
    # breakpoints in x; the marginal lives on [0, 1]
    fam_x = family.lo + width * family.breakpoints()
    pts = np.unique(np.concatenate([[0.0, 1.0], marginal.breaks,
                                    fam_x[(fam_x > 0.0) & (fam_x < 1.0)]]))
    x0, w0 = np.polynomial.legendre.leggauss(16)
    a, b = pts[:-1], pts[1:]
    xs = (0.5 * (b - a)[:, None] * (x0[None, :] + 1.0) + a[:, None]).ravel()
    ws = (0.5 * (b - a)[:, None] * w0[None, :]).ravel()
    dens = marginal.density(xs)
    vals = (ws * dens) @ family.values(xs)
    return MomentVector(vals, family.name, marginal.label)


def gaussian_moments(family, gaussian, nodes=160):
    """Moments of a planar family against a normal law, with mass outside
    the domain box sent to its nearest boundary point.

    Product Gauss-Hermite quadrature on ``nodes**2`` points.
    """
    z, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    Z = np.stack(np.meshgrid(z, z, indexing="ij"), axis=-1).reshape(-1, 2)
    W = np.outer(w, w).ravel()
    L = np.linalg.cholesky(gaussian.cov)
    pts = gaussian.mean[None, :] + Z @ L.T
    pts = np.clip(pts, family.lo, family.hi)
    vals = W @ family.values(pts)
    return MomentVector(vals, family.name, "gaussian")


def martingale_family(n_prime, domain=(0.0, 1.0)):
    """Hats with knots k/N' on ``domain`` used as martingale multipliers."""
    return Hat(n_prime, domain=domain)


def family_from_spec(spec, domain=(0.0, 1.0)):
    """Build a family from ``{"family": "pwc"|"hat"|"affine"|"regpp"|"mesh2d", "N": .., "eps": ..}``."""
    kind = spec["family"]
    N = spec["N"]
    if kind == "pwc":
        return PiecewiseConstant(N, domain)
    if kind == "hat":
        return Hat(N, domain)
    if kind == "affine":
        return AffinePair(N, domain)
    if kind == "regpp":
        return RegularizedPosPart(N, spec.get("eps"), domain)
    if kind == "mesh2d":
        return Mesh2D(N, spec.get("eps"), domain)
    raise ValueError(f"unknown family {kind!r}")
