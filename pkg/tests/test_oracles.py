import numpy as np
import pytest
from scipy import stats
from scipy.linalg import solve_discrete_are

from oracles import box_optimal_returns, clipped_lqr_returns, finite_horizon_lqr, ks_uniform, lqr_expected_return, point_mass_axis


def test_riccati_approaches_the_infinite_horizon_solution():
    a, b, q, r = point_mass_axis()
    gains, _ = finite_horizon_lqr(2000)
    p_inf = solve_discrete_are(a, b, q, r)
    k_inf = np.linalg.solve(r + b.T @ p_inf @ b, b.T @ p_inf @ a)
    np.testing.assert_allclose(gains[0], k_inf, rtol=1e-8)


def test_lqr_reference_values():
    # frozen from the Riccati oracle above
    assert lqr_expected_return() == pytest.approx(-4.909, abs=1e-3)
    clipped = clipped_lqr_returns(128, 10_000).mean()
    assert clipped == pytest.approx(-6.295, abs=1e-3)
    # box constraints cost a lot relative to the unconstrained optimum
    assert clipped < lqr_expected_return()


def test_ks_matches_scipy():
    x = np.random.default_rng(0).uniform(-1, 1, size=500) ** 3
    assert ks_uniform(x) == pytest.approx(stats.kstest(x, stats.uniform(-1, 2).cdf).statistic, abs=1e-12)


def test_box_constrained_optimum_bounds_clipped_lqr():
    opt = box_optimal_returns(128, 10_000)
    lqr = clipped_lqr_returns(128, 10_000)
    assert np.all(lqr <= opt + 1e-9)
    assert opt.mean() == pytest.approx(-6.2842, abs=1e-4)
    # clipping the LQR law is within a fraction of a percent of optimal here
    assert abs(lqr.mean() - opt.mean()) < 0.005 * abs(opt.mean())
