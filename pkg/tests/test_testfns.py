import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mcot.measures import GaussianMarginal2D, Marginal1D, cell_masses, hat_measure
from mcot.testfns import (AffinePair, FunctionFamily, Hat, Mesh2D, PiecewiseConstant,
                          RegularizedPosPart, UnsupportedOperationError, evaluate,
                          evaluate_derivative, family_from_spec, gaussian_moments,
                          martingale_family, moments, smooth_pos)

unit = st.floats(0.0, 1.0)


def test_pwc_cell_convention():
    fam = PiecewiseConstant(4)
    assert evaluate(fam, 1, 0.0) == 1.0
    assert evaluate(fam, 1, 0.25) == 1.0
    assert evaluate(fam, 2, 0.25 + 1e-9) == 1.0
    assert evaluate(fam, 4, 1.0) == 1.0


def test_functions_vanish_outside_box():
    for fam in (PiecewiseConstant(3), Hat(3), AffinePair(3), RegularizedPosPart(3)):
        assert np.all(fam.values(np.array([-0.5, 1.5])) == 0.0)


@given(unit, st.integers(1, 10))
def test_pwc_and_affine_partition_of_unity(x, N):
    assert PiecewiseConstant(N).values(x).sum() == pytest.approx(1.0)
    assert AffinePair(N).values(x).sum() == pytest.approx(1.0)


@given(unit, st.integers(1, 10))
def test_hats_sum_to_one_beyond_first_knot(x, N):
    s = Hat(N).values(x).sum()
    assert s == pytest.approx(min(1.0, N * x), abs=1e-12)


def test_hat_interpolates_knots():
    fam = Hat(5)
    V = fam.values(np.arange(1, 6) / 5)
    assert np.allclose(V, np.eye(5))


@given(st.floats(0.0, 1.0), st.integers(1, 8))
def test_regpp_matches_positive_part_away_from_knots(x, N):
    fam = RegularizedPosPart(N)
    knots = np.arange(N + 1) / N
    if np.min(np.abs(x - knots)) <= fam.eps:
        return
    exact = np.concatenate([[max(0.0, 1 / N - x)], np.maximum(0.0, x - knots[:-1])])
    assert np.allclose(fam.values(x)[0], exact, atol=1e-15)


@given(st.floats(-0.2, 1.2), st.integers(1, 6))
def test_regpp_derivative_matches_finite_difference(x, N):
    fam = RegularizedPosPart(N, domain=(-0.5, 1.5))
    h = 1e-7
    fd = (fam.values(x + h) - fam.values(x - h)) / (2 * h)
    assert np.allclose(fam.derivatives(x), fd, atol=1e-5)


def test_smooth_pos_is_c1():
    eps = 0.1
    for t in (-eps, eps):
        left, right = smooth_pos(t - 1e-9, eps), smooth_pos(t + 1e-9, eps)
        assert abs(left - right) < 1e-8


def test_length_scaling_keeps_unit_slope():
    fam = RegularizedPosPart(2, domain=(-4.0, 4.0))
    # phi_2 is (x - 0)^+ in physical units on [-4, 4]
    assert evaluate(fam, 2, 2.0) == pytest.approx(2.0)
    assert evaluate_derivative(fam, 2, 2.0) == pytest.approx(1.0)


def test_mesh2d_layout_and_gradient():
    fam = Mesh2D(5, domain=(-4.0, 4.0))
    assert fam.size == 36 and fam.indices()[0] == (0, 0)
    rng = np.random.default_rng(3)
    pts = rng.uniform(-4, 4, size=(20, 2))
    h = 1e-6
    for d in range(2):
        e = np.zeros(2)
        e[d] = h
        fd = (fam.values(pts + e) - fam.values(pts - e)) / (2 * h)
        assert np.allclose(fam.derivatives(pts)[:, :, d], fd, atol=1e-5)


def test_pwc_has_no_derivative():
    with pytest.raises(UnsupportedOperationError):
        PiecewiseConstant(3).derivatives(0.5)


def test_pwc_moments_are_cell_masses(bundled):
    for m in bundled:
        assert np.allclose(moments(PiecewiseConstant(8), m).values, cell_masses(m, 8), atol=1e-14)


def test_hat_moments_of_uniform():
    vals = moments(Hat(4), Marginal1D.uniform()).values
    assert np.allclose(vals, [0.25, 0.25, 0.25, 0.125], atol=1e-15)


coeffs = st.lists(st.floats(0.0, 4.0), min_size=1, max_size=4).filter(lambda c: sum(c) > 0.1)


@given(coeffs, st.integers(1, 10))
def test_hat_measure_preserves_hat_moments(raw, N):
    c = np.asarray(raw) / np.sum(np.asarray(raw) / np.arange(1, len(raw) + 1))
    m = Marginal1D.poly(c)
    fam = Hat(N)
    assert np.allclose(moments(fam, hat_measure(m, N)).values, moments(fam, m).values, atol=1e-12)


def test_discrete_and_continuous_moments_agree_on_a_non_unit_box():
    fam = Hat(4, domain=(-1.0, 2.0))
    e = Marginal1D.empirical([0.3])
    assert moments(fam, e).values == pytest.approx(fam.values(0.3)[0])


def test_function_family_and_gaussian_moments():
    fam = FunctionFamily([lambda z: z[:, 0], lambda z: z[:, 0] * z[:, 1]], dim=2)
    g = GaussianMarginal2D(np.array([1.0, -2.0]), np.array([[2.0, 0.5], [0.5, 1.0]]))
    vals = gaussian_moments(fam, g).values
    assert np.allclose(vals, [1.0, 0.5 + 1.0 * -2.0], atol=1e-10)


def test_family_from_spec_and_martingale_family():
    assert isinstance(family_from_spec({"family": "affine", "N": 3}), AffinePair)
    assert family_from_spec({"family": "regpp", "N": 3, "eps": 0.01}).eps == 0.01
    chi = martingale_family(6, (0.0, 2.0))
    assert isinstance(chi, Hat) and chi.N == 6 and chi.hi == 2.0
    with pytest.raises(ValueError):
        family_from_spec({"family": "spline", "N": 3})
    with pytest.raises(ValueError):
        Hat(0)
