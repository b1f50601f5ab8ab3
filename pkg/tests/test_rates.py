import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mcot.linprog import northwest_corner
from mcot.measures import DomainError, Marginal1D, cell_masses, wasserstein_1d
from mcot.problem import CostFunction, StructureError
from mcot.rates import (RateReport, affine_w1_rate, affine_w2_rate, check_fixtures,
                        compute_oracles, convergence_sweep, grid_lp_value, load_fixtures,
                        martingale_sweep, max_density_difference, pwc_moment_matching,
                        pwc_sandwich, reconstruct_coupling, regularity_counterexample,
                        sign_changes, smooth_companion, smooth_moment_bound)
from mcot.testfns import AffinePair, Hat, moments

rows = st.lists(st.tuples(st.integers(1, 64), st.floats(-1, 1), st.floats(-1, 1),
                          st.floats(0, 1), st.floats(-1, 0)), min_size=1, max_size=6)


@given(rows, st.floats(0.0, 1e-3))
def test_report_roundtrips_through_csv(data, tol):
    rep = RateReport("x", tol)
    for N, exact, approx, bound, lower in data:
        rep.add("chk", N, exact, approx, bound, lower)
    back = RateReport.from_csv(rep.to_csv(), "x", tol)
    assert back.rows == rep.rows
    assert back.recheck() and back.passed == rep.passed
    assert (rep.worst_margin >= 0.0) == rep.passed


def test_report_summary_fields():
    rep = RateReport("demo", 0.0)
    rep.add("a", 2, 1.0, 0.9, 0.2)
    assert rep.summary() == {"experiment": "demo", "pass": True,
                             "worst_margin": pytest.approx(0.1)}
    rep.add("a", 4, 1.0, 0.5, 0.2)
    assert not rep.passed


def test_pwc_sandwich_bundled(bundled):
    rep = pwc_sandwich(*bundled, CostFunction.power(1), [5, 10], K=1.0)
    assert rep.passed and rep.metadata["K_cost"] == 2.0
    assert rep.metadata["lp_vs_monotone_max_diff"] <= 1e-12


def test_counterexample_rate_is_first_order():
    assert regularity_counterexample([1, 2, 4, 8]).passed
    # the atoms share the AffinePair moments of the uniform law
    U = Marginal1D.uniform()
    atoms = Marginal1D.empirical((np.arange(4) + 0.5) / 4)
    assert np.allclose(moments(AffinePair(4), atoms).values, moments(AffinePair(4), U).values)


def test_crossing_pair_sign_changes_and_density_gap():
    bump = Marginal1D.poly([0.0, 6.0, -6.0])
    U = Marginal1D.uniform()
    assert sign_changes(bump, U) == 1
    assert max_density_difference(bump, U) == pytest.approx(1.0)


def test_affine_rates(bundled):
    assert affine_w1_rate(*bundled, [4, 8]).passed
    bump = Marginal1D.poly([0.0, 6.0, -6.0])
    rep = affine_w1_rate(bump, Marginal1D.uniform(), [4, 8])
    assert rep.passed and rep.metadata["Q"] == 1
    assert affine_w2_rate(*bundled, [4, 8, 16]).passed


def test_smooth_companion_keeps_hat_and_slope_moments():
    mu = Marginal1D.poly([0.5, 1.0])
    for N in (2, 5):
        nu = smooth_companion(mu, N)
        for fam in (Hat(N), AffinePair(N)):
            assert np.allclose(moments(fam, nu).values, moments(fam, mu).values, atol=1e-13)


def test_smooth_bounds():
    mu = Marginal1D.poly([0.5, 1.0])
    for p in (1, 2, 3):
        assert smooth_moment_bound(mu, [2, 4, 8], p=p).passed
    with pytest.raises(DomainError):
        smooth_moment_bound(Marginal1D.poly([0, 0, 3]), [4], p=2)


def test_sweep_is_monotone_and_below_exact(bundled):
    rep = convergence_sweep(*bundled, CostFunction.power(2), [2, 4, 8])
    assert rep.passed
    with pytest.raises(ValueError):
        convergence_sweep(*bundled, CostFunction.power(2), [2, 6])


def test_martingale_sweep_monotone():
    rep = martingale_sweep(Marginal1D.uniform(0.25, 0.75), Marginal1D.uniform(),
                           CostFunction.power(3), 4, [1, 2, 4])
    assert rep.passed and len(rep.rows) == 2


def test_moment_matching_trials(bundled, rng):
    rep = pwc_moment_matching(bundled[0], [2, 4], [1, 2], 5, rng)
    assert rep.passed and len(rep.rows) == 20


def test_grid_lp_value_upper_bounds_transport(bundled):
    fam = Hat(4)
    t = (moments(fam, bundled[0]).values, moments(fam, bundled[1]).values)
    v = grid_lp_value(CostFunction.power(1), (fam, fam), t, np.arange(17) / 16)
    # fewer constraints than full marginals: below W_1
    assert v <= wasserstein_1d(*bundled, 1) + 1e-9


def test_reconstructed_coupling(bundled, rng):
    mu, nu = bundled
    N = 4
    plan = northwest_corner(cell_masses(mu, N), cell_masses(nu, N))
    rc = reconstruct_coupling(plan, mu, nu)
    assert np.allclose(rc.cell_probabilities(), plan)
    z = rc.sample(4000, rng)
    cells = np.clip(np.ceil(z * N), 1, N).astype(int) - 1
    counts = np.zeros((N, N))
    np.add.at(counts, (cells[:, 0], cells[:, 1]), 1.0)
    assert np.all(counts[plan == 0.0] == 0.0)
    with pytest.raises(StructureError):
        reconstruct_coupling(-plan, mu, nu)


def test_packaged_fixtures_match_fresh_oracles():
    fixtures = load_fixtures()
    fresh = compute_oracles()
    assert check_fixtures(fixtures, fresh) == []
    assert fixtures["w1_bundled"]["value"] == pytest.approx(5 / 12, abs=1e-12)
    assert fixtures["martingale_uniform_cubic"]["value"] == 1 / 64
    for entry in fixtures.values():
        assert set(entry) == {"value", "method", "tolerance"}
    moved = json.loads(json.dumps(fixtures))
    moved["w1_bundled"]["value"] += 1e-6
    assert check_fixtures(moved, fresh) == ["w1_bundled"]
