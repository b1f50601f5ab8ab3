import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mcot.measures import (DiscreteMeasure, DomainError, GaussianMarginal2D,
                           Marginal1D, bures_gaussian_cost, cdf_integral,
                           cell_masses, gaussian_transport_matrix, hat_atoms,
                           hat_measure, inverse_cdf, marginal_from_spec,
                           read_empirical_csv, wasserstein_1d,
                           wasserstein_pp_cdf_form, write_empirical_csv)

# values computed with mpmath quad (30 digits) on the quantile form
# int_0^1 |u^(1/3) - (1 - sqrt(1 - u))|^p du, then frozen
W2SQ_BUNDLED = 0.18445859015241854670849733659
W3CUBE_BUNDLED = 0.0843818573699142418341403078628


def _poly_density(raw):
    """Non-negative coefficients rescaled to a probability density."""
    c = np.asarray(raw, dtype=float)
    return Marginal1D.poly(c / np.sum(c / np.arange(1, c.size + 1)))


densities = st.lists(st.floats(0.0, 5.0), min_size=1, max_size=4).filter(
    lambda c: sum(c) > 0.1).map(_poly_density)
empiricals = st.lists(st.tuples(st.floats(0.0, 1.0), st.floats(0.05, 1.0)),
                      min_size=1, max_size=8).map(
    lambda aw: Marginal1D.empirical([a for a, _ in aw],
                                    np.array([w for _, w in aw]) / sum(w for _, w in aw)))


def test_cell_masses_closed_form(bundled):
    mu, nu = bundled
    assert np.allclose(cell_masses(mu, 4), np.array([1, 7, 19, 37]) / 64, atol=1e-15)
    # 2 - 2y: masses (2 h - (b^2 - a^2)) on [a, b]
    b = np.arange(1, 5) / 4
    a = b - 0.25
    assert np.allclose(cell_masses(nu, 4), 2 * 0.25 - (b ** 2 - a ** 2), atol=1e-15)


def test_cell_masses_put_boundary_atom_in_first_cell():
    m = Marginal1D.empirical([0.0, 0.5, 1.0], [0.25, 0.5, 0.25])
    assert np.allclose(cell_masses(m, 2), [0.75, 0.25])


def test_w1_bundled_is_five_twelfths(bundled):
    assert wasserstein_1d(*bundled, p=1) == pytest.approx(5 / 12, abs=1e-12)


def test_w2_and_w3_bundled_against_frozen_quadrature(bundled):
    assert wasserstein_1d(*bundled, p=2) == pytest.approx(W2SQ_BUNDLED, abs=1e-10)
    assert wasserstein_1d(*bundled, p=3) == pytest.approx(W3CUBE_BUNDLED, abs=1e-10)


def test_w2_cdf_form_agrees_with_quantile_form(bundled):
    assert wasserstein_pp_cdf_form(*bundled, p=2.0) == pytest.approx(W2SQ_BUNDLED, abs=1e-6)


def test_mixed_pairs_trivial_values():
    U = Marginal1D.uniform()
    half = Marginal1D.empirical([0.5])
    assert wasserstein_1d(U, half, 1) == pytest.approx(0.25, abs=1e-14)
    assert wasserstein_1d(half, U, 2) == pytest.approx(1 / 12, abs=1e-14)
    assert wasserstein_1d(Marginal1D.empirical([0.0]), Marginal1D.empirical([1.0]), 3) == 1.0


def test_order_below_one_rejected(bundled):
    with pytest.raises(DomainError):
        wasserstein_1d(*bundled, p=0.5)


@given(densities, st.floats(0.0, 1.0))
def test_inverse_cdf_inverts_cdf(m, u):
    x = inverse_cdf(m, u)
    assert float(m.cdf(x)) == pytest.approx(u, abs=1e-9)


@given(densities, densities, st.sampled_from([1.0, 2.0, 3.0]))
def test_wasserstein_symmetric_and_nonnegative(m1, m2, p):
    a = wasserstein_1d(m1, m2, p)
    assert a >= -1e-14
    assert a == pytest.approx(wasserstein_1d(m2, m1, p), abs=1e-10)


@given(densities, empiricals, st.sampled_from([1.0, 2.0]))
def test_mixed_route_matches_quantile_quadrature(cont, emp, p):
    u = (np.arange(200_000) + 0.5) / 200_000
    brute = np.mean(np.abs(cont.inverse_cdf(u) - emp.inverse_cdf(u)) ** p)
    assert wasserstein_1d(cont, emp, p) == pytest.approx(brute, abs=2e-5)


@given(empiricals, empiricals)
def test_w1_triangle_with_uniform(e1, e2):
    U = Marginal1D.uniform()
    assert wasserstein_1d(e1, e2, 1) <= wasserstein_1d(e1, U, 1) + wasserstein_1d(U, e2, 1) + 1e-12


@given(densities, st.integers(1, 12))
def test_hat_measure_matches_cdf_at_knots_and_cell_integrals(m, N):
    h = hat_measure(m, N)
    knots = np.arange(N + 1) / N
    assert np.allclose(h.cdf(knots), m.cdf(knots), atol=1e-12)
    for a, b in zip(knots[:-1], knots[1:]):
        assert cdf_integral(h, a, b) == pytest.approx(cdf_integral(m, a, b), abs=1e-12)


def test_hat_atoms_lie_in_their_cells(bundled):
    xs, ws = hat_atoms(bundled[0], 8)
    assert xs[0] == 0.0 and ws[0] == 0.0
    m = np.arange(1, 9)
    assert np.all(xs[1:] >= (m - 1) / 8) and np.all(xs[1:] <= m / 8)


def test_uniform_rejects_support_outside_unit_interval():
    with pytest.raises(DomainError):
        Marginal1D.uniform(0.5, 1.5)


def test_empirical_merges_ties():
    m = Marginal1D.empirical([0.2, 0.2, 0.7], [0.25, 0.25, 0.5])
    assert np.array_equal(m.atoms, [0.2, 0.7])
    assert np.allclose(m.weights, [0.5, 0.5])


def test_bures_value_and_map():
    mu = GaussianMarginal2D(np.zeros(2), np.eye(2))
    nu = GaussianMarginal2D(np.ones(2), np.array([[1.0, 0.7], [0.7, 1.0]]))
    # 2 + 4 - 2 (sqrt(1.7) + sqrt(0.3))
    assert bures_gaussian_cost(mu, nu) == pytest.approx(6 - 2 * (1.7 ** 0.5 + 0.3 ** 0.5), abs=1e-12)
    A = gaussian_transport_matrix(mu, nu)
    assert np.allclose(A @ mu.cov @ A.T, nu.cov)


def test_gaussian_rejects_indefinite_covariance():
    with pytest.raises(DomainError):
        GaussianMarginal2D(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_discrete_measure_checks_mass_and_roundtrips():
    with pytest.raises(DomainError):
        DiscreteMeasure(np.zeros((2, 2)), [0.5, 0.6])
    m = DiscreteMeasure([[0.1, 0.2], [0.3, 1 / 3]], [0.25, 0.75])
    back = DiscreteMeasure.from_csv(m.to_csv())
    assert m.to_csv().splitlines()[0] == "w,x1,x2"
    assert np.array_equal(back.points, m.points) and np.array_equal(back.weights, m.weights)


def test_empirical_csv_roundtrip():
    m = Marginal1D.empirical([0.1, 0.4], [0.3, 0.7])
    back = read_empirical_csv(write_empirical_csv(m))
    assert np.array_equal(back.atoms, m.atoms) and np.array_equal(back.weights, m.weights)


def test_marginal_from_spec_kinds():
    assert marginal_from_spec({"kind": "uniform", "a": 0.25, "b": 0.75}).cdf(0.5) == pytest.approx(0.5)
    pp = marginal_from_spec({"kind": "piecewise_poly", "breaks": [0, 0.5, 1], "coeffs": [[0.5], [1.5]]})
    assert pp.cdf(0.5) == pytest.approx(0.25)
    with pytest.raises(DomainError):
        marginal_from_spec({"kind": "beta"})
