import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mcot.measures import GaussianMarginal2D, Marginal1D
from mcot.pgd import (ParticleState, PGDParams, gradient, objective_terms,
                      penalized_objective, pgd_run, random_state, softmax,
                      state_to_csv, trace_to_csv)
from mcot.problem import (CostFunction, gaussian_problem, martingale_problem,
                          multimarginal_problem, two_marginal_problem)
from mcot.testfns import (Mesh2D, PiecewiseConstant, RegularizedPosPart,
                          UnsupportedOperationError, martingale_family)


def regpp_problem(bundled, N=4, p=2):
    return two_marginal_problem(*bundled, RegularizedPosPart(N), RegularizedPosPart(N),
                                CostFunction.power(p))


def fd_gradient(prob, state, eta_inv, h=1e-6):
    gpos = np.zeros_like(state.positions)
    for idx in np.ndindex(*state.positions.shape):
        up, dn = state.copy(), state.copy()
        up.positions[idx] += h
        dn.positions[idx] -= h
        gpos[idx] = (penalized_objective(prob, up, eta_inv)
                     - penalized_objective(prob, dn, eta_inv)) / (2 * h)
    glog = np.zeros(state.size)
    for k in range(state.size):
        up, dn = state.copy(), state.copy()
        up.logits[k] += h
        dn.logits[k] -= h
        glog[k] = (penalized_objective(prob, up, eta_inv)
                   - penalized_objective(prob, dn, eta_inv)) / (2 * h)
    return gpos, glog


def _assert_gradient(prob, state, eta_inv, atol=1e-5):
    gpos, glog = gradient(prob, state, eta_inv)
    fpos, flog = fd_gradient(prob, state, eta_inv)
    assert np.max(np.abs(gpos - fpos)) <= atol
    assert np.max(np.abs(glog - flog)) <= atol


@given(st.integers(0, 1000))
def test_gradient_matches_finite_differences_two_marginals(seed):
    prob = regpp_problem((Marginal1D.poly([0, 0, 3]), Marginal1D.poly([2, -2])))
    state = random_state(prob, K=6, seed=seed)
    state.logits = np.random.default_rng(seed).normal(size=6)
    _assert_gradient(prob, state, 50.0)


def test_gradient_matches_finite_differences_martingale():
    prob = martingale_problem(Marginal1D.uniform(0.25, 0.75), Marginal1D.uniform(),
                              RegularizedPosPart(4), RegularizedPosPart(4),
                              martingale_family(4), CostFunction.power(3))
    state = random_state(prob, K=8, seed=3)
    _assert_gradient(prob, state, 60.0)


def test_gradient_matches_finite_differences_symmetric_coulomb():
    prob = multimarginal_problem([Marginal1D.uniform()] * 3, [RegularizedPosPart(3)] * 3,
                                 CostFunction.coulomb(3), symmetric=True)
    state = random_state(prob, K=5, seed=4)
    _assert_gradient(prob, state, 10.0, atol=1e-4)


def test_gradient_matches_finite_differences_planar():
    mu = GaussianMarginal2D(np.zeros(2), np.eye(2))
    nu = GaussianMarginal2D(np.ones(2), np.array([[1.0, 0.7], [0.7, 1.0]]))
    prob = gaussian_problem(mu, nu, Mesh2D(3, domain=(-4.0, 4.0)))
    state = random_state(prob, K=5, seed=5)
    _assert_gradient(prob, state, 2.0)


def test_objective_decreases_monotonically(bundled):
    prob = regpp_problem(bundled)
    res = pgd_run(prob, PGDParams(eta_inv=100.0, max_iter=150, seed=1))
    F = res.trace[:, 1]
    assert np.all(np.diff(F) <= 1e-15)
    assert np.allclose(res.trace[:, 1], res.trace[:, 2] + res.trace[:, 3])
    assert res.iterations == 150 and not res.converged
    assert res.message == "iteration cap reached"


def test_run_is_deterministic_and_seed_sensitive(bundled):
    prob = regpp_problem(bundled, N=3)
    p = PGDParams(eta_inv=30.0, max_iter=40, seed=9)
    a, b = pgd_run(prob, p), pgd_run(prob, p)
    assert trace_to_csv(a.trace) == trace_to_csv(b.trace)
    assert state_to_csv(prob, a.state) == state_to_csv(prob, b.state)
    c = pgd_run(prob, PGDParams(eta_inv=30.0, max_iter=40, seed=10))
    assert state_to_csv(prob, c.state) != state_to_csv(prob, a.state)


def test_loose_tolerance_converges_immediately(bundled):
    res = pgd_run(regpp_problem(bundled), PGDParams(eta_inv=10.0, tol=1e9))
    assert res.converged and res.iterations == 0


def test_positions_stay_in_box(bundled):
    prob = regpp_problem(bundled)
    res = pgd_run(prob, PGDParams(eta_inv=100.0, max_iter=50))
    assert np.all(res.state.positions >= 0.0) and np.all(res.state.positions <= 1.0)


def test_non_differentiable_family_rejected(bundled):
    prob = two_marginal_problem(*bundled, PiecewiseConstant(3), PiecewiseConstant(3),
                                CostFunction.power(2))
    with pytest.raises(UnsupportedOperationError):
        pgd_run(prob, PGDParams(eta_inv=1.0, max_iter=1))


def test_csv_headers(bundled):
    prob = regpp_problem(bundled)
    state = random_state(prob, K=3)
    assert state_to_csv(prob, state).splitlines()[0] == "w,x,y"
    mu = GaussianMarginal2D(np.zeros(2), np.eye(2))
    gp = gaussian_problem(mu, mu, Mesh2D(2))
    assert state_to_csv(gp, random_state(gp, K=2)).splitlines()[0] == "w,x1,x2,y1,y2"
    res = pgd_run(prob, PGDParams(eta_inv=1.0, max_iter=2))
    assert trace_to_csv(res.trace).splitlines()[0] == "iter,F,cost,penalty,grad_norm"


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=10), st.floats(-100, 100))
def test_softmax_is_shift_invariant_probability(a, shift):
    a = np.array(a)
    p = softmax(a)
    assert p.sum() == pytest.approx(1.0) and np.all(p >= 0.0)
    assert np.allclose(softmax(a + shift), p)


def test_objective_terms_split():
    prob = two_marginal_problem(Marginal1D.uniform(), Marginal1D.uniform(),
                                RegularizedPosPart(2), RegularizedPosPart(2), CostFunction.power(2))
    state = ParticleState([[0.2, 0.6]], [0.0])
    F, cost, pen = objective_terms(prob, state, 3.0)
    assert cost == pytest.approx(0.16) and F == pytest.approx(cost + pen)
    F1, _, pen1 = objective_terms(prob, state, 6.0)
    assert pen1 == pytest.approx(2 * pen)
