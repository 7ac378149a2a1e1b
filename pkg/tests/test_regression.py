import warnings

import numpy as np
import pytest

from pathctrl.degenerate import perturb
from pathctrl.errors import RegressionFailure
from pathctrl.kernel import gaussian_weights
from pathctrl.problems import bs_call, call_sharpe, linear_martingale, sharpe_ref_vol, uvm_call
from pathctrl.regression import (CONSTANT, BasisSpec, RankWarning, fit_step,
                                 regression_backward, truncate_targets)
from pathctrl.scheme import LatticeFunction, simulate_reference, solve


def _fit_stderr(fit, states, targets, at):
    """Homoscedastic standard error of a fitted value at ``at``."""
    A = fit.design(states)
    resid = A @ fit.coef - targets
    cov = np.linalg.inv(A.T @ A) * resid.var()
    a = fit.design(np.atleast_2d(at))[0]
    return float(np.sqrt(a @ cov @ a))


def test_fit_linear_targets_exact():
    x = np.random.default_rng(0).normal(size=(500, 2))
    y = 1.5 + 2 * x[:, 0] - 0.5 * x[:, 1]
    fit = fit_step(x, y, BasisSpec(degree=1))
    assert fit.residual < 1e-10
    assert fit.coef.size == BasisSpec(degree=1).size(2) == 3


def test_fit_constant_is_mean():
    rng = np.random.default_rng(1)
    y = rng.normal(size=300)
    fit = fit_step(rng.normal(size=(300, 1)), y, CONSTANT)
    assert fit.coef[0] == pytest.approx(y.mean(), abs=1e-12)


def test_fit_residual_below_target_spread():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1000, 1))
    y = np.sin(3 * x[:, 0]) + rng.normal(size=1000)
    for basis in (BasisSpec(degree=3), BasisSpec("pwlin", bins=6)):
        assert fit_step(x, y, basis).residual <= y.std() + 1e-12


def test_lstsq_solver_agrees():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2000, 1))
    y = np.exp(x[:, 0]) + rng.normal(size=2000)
    a = fit_step(x, y, solver="normal")
    b = fit_step(x, y, solver="lstsq")
    np.testing.assert_allclose(a.coef, b.coef, rtol=1e-8)


def test_fit_errors_and_rank_warning():
    x = np.zeros((50, 1))
    with pytest.raises(RegressionFailure):
        fit_step(x[:2], np.zeros(2))
    with pytest.raises(RegressionFailure):
        fit_step(np.arange(10.0)[:, None], np.full(10, np.nan))
    with pytest.warns(RankWarning):
        fit = fit_step(x, np.ones(50))
    assert fit.ridge
    assert fit.predict(x)[0] == pytest.approx(1.0, abs=1e-6)


def test_basis_parse_and_per_step():
    assert BasisSpec.parse("pwlin:16") == BasisSpec("pwlin", bins=16)
    assert BasisSpec.parse("poly:2").label() == "poly:2"
    with pytest.raises(ValueError):
        BasisSpec.parse("spline:3")
    b = BasisSpec(per_step={0: CONSTANT})
    assert b.at(0) is CONSTANT and b.at(1) is b


def test_truncate_examples():
    t = np.array([1.0, -2.0, 3.0])
    out, hits = truncate_targets(t, 10.0)
    assert hits == 0 and np.array_equal(out, t)
    out, hits = truncate_targets(np.array([1.0, 1e10, -5.0]), 1e3)
    assert hits == 1 and out[1] == 1e3 and out[0] == 1.0


def _next_values(lift, ens, out, k):
    if k == ens.n - 1:
        return lift.terminal_reward(ens.x[:, ens.n], ens.s[:, ens.n])
    return out.steps[k + 1].y_values


def test_gamma_vanishes_for_linear_targets():
    lift = linear_martingale(x0=1.0, sigma0=0.3)
    ens = simulate_reference(lift, 4, 50_000, seed=4)
    out = regression_backward(lift, ens, basis=BasisSpec(degree=1))
    for k in range(1, 4):
        _, _, wg = gaussian_weights(ens.sigma0[:, k], ens.dW[:, k], ens.h)
        targets = _next_values(lift, ens, out, k) * wg[:, 0, 0]
        fit = out.steps[k].gamma_fits[(0, 0)]
        for x in (0.7, 1.0, 1.3):
            se = _fit_stderr(fit, ens.states(k), targets, [x])
            assert abs(fit.predict(np.array([[x]]))[0]) < 3 * se


def test_scheme1_singleton_plain_regression():
    lift = bs_call()
    ens = simulate_reference(lift, 3, 20_000, seed=5)
    out = regression_backward(lift, ens)
    assert np.all(out.steps[2].g_values == 0)
    ref = fit_step(ens.states(2), lift.terminal_reward(ens.x[:, 3], ens.s[:, 3]), BasisSpec(),
                   t_index=2)
    np.testing.assert_allclose(out.steps[2].y_values, ref.predict(ens.states(2)), rtol=1e-12)


def test_scheme2_singleton_regresses_terminal():
    lift = bs_call()
    ens = simulate_reference(lift, 3, 20_000, seed=5)
    out = regression_backward(lift, ens, scheme=2)
    term = lift.terminal_reward(ens.x[:, 3], ens.s[:, 3])
    for k in (1, 2):
        np.testing.assert_array_equal(out.steps[k].y_targets, term)


def test_schemes_agree_for_one_step():
    lift = uvm_call(var_lo=0.04, var_hi=0.09, controls=4, ref_sigma=0.2)
    ens = simulate_reference(lift, 1, 20_000, seed=6)
    a = regression_backward(lift, ens, scheme=1).y0
    b = regression_backward(lift, ens, scheme=2).y0
    assert a == pytest.approx(b, rel=1e-12)


def test_schemes_agree_without_driver():
    lift = bs_call()
    ens = simulate_reference(lift, 8, 20_000, seed=7)
    a = regression_backward(lift, ens, scheme=1).y0
    b = regression_backward(lift, ens, scheme=2).y0
    assert abs(a - b) <= 1e-8 * abs(b)


def test_one_step_bs_matches_oracle():
    lift = bs_call()
    oracle = solve(lift, 1).y0
    res = solve(lift, 1, engine="regress1", paths=100_000, seed=8)
    assert abs(res.y0 - oracle) <= 3 * res.bootstrap_stderr()


def test_z_at_the_money_matches_oracle():
    lift = bs_call()
    n, k = 4, 2
    oracle = solve(lift, n)
    z_or = LatticeFunction(oracle.steps[k].lattice, oracle.steps[k].z)(np.array([100.0]))[0]
    ens = simulate_reference(lift, n, 100_000, seed=9)
    out = regression_backward(lift, ens)
    st = out.steps[k]
    states = ens.states(k)
    _, wz, _ = gaussian_weights(ens.sigma0[:, k], ens.dW[:, k], ens.h)
    targets = _next_values(lift, ens, out, k) * wz[:, 0]
    z_fit = st.z_fits[0].predict(np.array([[100.0]]))[0]
    se = _fit_stderr(st.z_fits[0], states, targets, [100.0])
    assert abs(z_fit - z_or) <= 3 * se
    assert 0.4 < z_or < 0.7


def test_centering_keeps_estimate_and_cuts_noise():
    lift = uvm_call(var_lo=0.04, var_hi=0.09, controls=4, ref_sigma=0.2)
    ens = simulate_reference(lift, 4, 20_000, seed=10)
    plain = regression_backward(lift, ens, basis=BasisSpec("pwlin", bins=8))
    cent = regression_backward(lift, ens, basis=BasisSpec("pwlin", bins=8), centering="mean")
    assert abs(plain.y0 - cent.y0) < 0.05 * plain.y0
    assert cent.steps[1].z_fits[0].residual < plain.steps[1].z_fits[0].residual
    with pytest.raises(ValueError):
        regression_backward(lift, ens, centering="other")


def test_report_serializes():
    lift = bs_call()
    ens = simulate_reference(lift, 2, 5_000, seed=11)
    out = regression_backward(lift, ens)
    d = out.report.to_dict()
    assert len(d["coef_y"]) == 2
    assert len(d["coef_y"][1]) == BasisSpec().size(1)
    assert d["bound_y"] > 0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        regression_backward(lift, ens)


def test_call_sharpe_truncation_rate_below_one_percent():
    pp = perturb(call_sharpe(), 0.1, sharpe_ref_vol(0.1))
    res = solve(pp.lift, 8, engine="regress1", paths=100_000, wellposed=pp.wellposed)
    targets_per_step = 1 + 2 + 3   # Y, two Z components, three Gamma entries
    rate = res.trunc_hits / (8 * 100_000 * targets_per_step)
    assert rate < 0.01
