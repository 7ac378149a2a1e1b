import numpy as np
import pytest

from helpers import additive_lift, call
from pathctrl.degenerate import perturb
from pathctrl.errors import (AssumptionViolation, EngineUnsupported, EvaluationError,
                             WellPosednessError)
from pathctrl.problems import bs_call, call_sharpe, linear_martingale, sharpe_ref_vol, uvm_call
from pathctrl.scheme import (DriverInput, Lattice, LatticeFunction, QuadratureEngine, driver_G,
                             quadrature_engine, simulate_reference, solve)


def test_reference_variance_brownian_scaling():
    lift = linear_martingale(x0=0.0, sigma0=1.0)
    ens = simulate_reference(lift, 4, 100_000, seed=1)
    xn = ens.x[:, -1, 0]
    v = xn.var()
    se = np.sqrt(np.mean((xn - xn.mean()) ** 4) - v * v) / np.sqrt(xn.size)
    assert abs(v - 1.0) < 4 * se


def test_reference_martingale_mean():
    ens = simulate_reference(linear_martingale(x0=1.0, sigma0=0.2), 8, 100_000, seed=2)
    xn = ens.x[:, -1, 0]
    assert abs(xn.mean() - 1.0) < 4 * xn.std() / np.sqrt(xn.size)


def test_reference_deterministic_across_workers():
    lift = bs_call()
    a = simulate_reference(lift, 4, 10_000, seed=9, workers=1)
    b = simulate_reference(lift, 4, 10_000, seed=9, workers=4)
    c = simulate_reference(lift, 4, 10_000, seed=9, workers=1)
    for u, v, w in ((a.x, b.x, c.x), (a.dW, b.dW, c.dW)):
        assert u.tobytes() == v.tobytes() == w.tobytes()
    d = simulate_reference(lift, 4, 10_000, seed=10)
    assert not np.array_equal(a.dW, d.dW)


def test_reference_rejects_empty():
    with pytest.raises(ValueError):
        simulate_reference(bs_call(), 0, 10)


def test_driver_empty():
    lift = additive_lift([0.04], 0.2, call(0.0))
    val, u = driver_G(lift, DriverInput(0, (0.0,), [[3.0]], [1.0]), 0.1)
    assert val == pytest.approx(0.0, abs=1e-15) and u == 0.04


def test_driver_picks_max_variance_for_positive_gamma():
    grid = np.linspace(0.04, 0.09, 6)
    lift = additive_lift(grid, 0.2, call(0.0))
    val, u = driver_G(lift, DriverInput(0, (0.0,), [[2.0]], [0.0]), 0.1)
    assert u == pytest.approx(0.09)
    assert val == pytest.approx(0.5 * (0.09 - 0.04) * 2.0)
    enum = [0.5 * (v - 0.04) * 2.0 for v in grid]
    assert val == pytest.approx(max(enum))


def test_driver_ties_go_to_first_index():
    lift = additive_lift(np.linspace(0.04, 0.09, 6), 0.2, call(0.0))
    _, u = driver_G(lift, DriverInput(0, (0.0,), [[0.0]], [0.0]), 0.1)
    assert u == pytest.approx(0.04)


def test_driver_convexity():
    lift = additive_lift(np.linspace(0.04, 0.09, 6), 0.2, call(0.0), drift=0.0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        g1, g2, z1, z2 = rng.normal(size=4) * 3
        f = lambda g, z: driver_G(lift, DriverInput(0, (0.0,), [[g]], [z]), 0.1)[0]  # noqa: E731
        assert f(0.5 * (g1 + g2), 0.5 * (z1 + z2)) <= 0.5 * f(g1, z1) + 0.5 * f(g2, z2) + 1e-14


def test_driver_rejects_asymmetric_gamma():
    with pytest.raises(ValueError):
        DriverInput(0, (0.0, 0.0), [[1.0, 2.0], [0.0, 1.0]], [0.0, 0.0])


def test_driver_nan_reports_control():
    lift = additive_lift([0.04, 0.09], 0.2, call(0.0), running=float("nan"), validate=0)
    with pytest.raises(EvaluationError) as err:
        driver_G(lift, DriverInput(2, (0.0,), [[1.0]], [0.0]), 0.1)
    assert err.value.control_index == 0


def test_quadrature_linear():
    x = np.linspace(-2, 2, 7)
    ey, z, g = quadrature_engine(lambda xq, sq: xq[:, 0], x, np.ones(7), 0.1)
    np.testing.assert_allclose(ey, x, atol=1e-10)
    np.testing.assert_allclose(z, 1.0, atol=1e-10)
    np.testing.assert_allclose(g, 0.0, atol=1e-10)


def test_quadrature_quadratic():
    x = np.linspace(-2, 2, 7)
    _, z, g = quadrature_engine(lambda xq, sq: xq[:, 0] ** 2, x, np.full(7, 0.7), 0.25)
    np.testing.assert_allclose(g, 2.0, atol=1e-8)
    np.testing.assert_allclose(z, 2 * x, atol=1e-8)


def test_quadrature_lognormal_mean():
    x = np.array([-1.0, 0.0, 0.5])
    ey, _, _ = quadrature_engine(lambda xq, sq: np.exp(xq[:, 0]), x, np.ones(3), 0.1)
    np.testing.assert_allclose(ey, np.exp(x + 0.05), rtol=1e-12)


def test_quadrature_rejects_2d():
    with pytest.raises(EngineUnsupported):
        quadrature_engine(lambda xq, sq: xq[:, 0], np.zeros((3, 2)), np.ones(3), 0.1)


def test_lattice_function_extrapolates_linearly():
    lat = Lattice(np.linspace(0, 1, 11))
    f = LatticeFunction(lat, 2 * lat.x + 1)
    np.testing.assert_allclose(f(np.array([-1.0, 0.55, 2.0])), [-1.0, 2.1, 5.0], atol=1e-12)


def test_singleton_martingale_exact():
    lift = linear_martingale(x0=1.3, sigma0=0.3)
    for n in (1, 2, 5):
        assert solve(lift, n).y0 == pytest.approx(1.3, abs=1e-10)


def test_monotone_in_control_set():
    small = uvm_call(var_lo=0.04, var_hi=0.09, controls=3, ref_sigma=0.2)
    large = uvm_call(var_lo=0.04, var_hi=0.09, controls=5, ref_sigma=0.2)
    assert set(small.controls) <= set(large.controls)
    assert solve(large, 8).y0 >= solve(small, 8).y0 - 1e-12


def test_comparison_singleton():
    lo = additive_lift([0.04], 0.2, call(0.1), running=0.0)
    hi = additive_lift([0.04], 0.2, call(0.0), running=0.05)
    for n in (2, 8):
        assert solve(lo, n).y0 <= solve(hi, n).y0


def test_uvm_oracle_exceeds_low_vol_price():
    lift = uvm_call(var_lo=0.04, var_hi=0.09, controls=4, ref_sigma=0.2)
    res = solve(lift, 8)
    assert res.conforming
    assert res.argmax_counts.shape == (8, 4)
    assert res.y0 > solve(bs_call(sigma=0.2), 8).y0


def test_gate_blocks_violations():
    with pytest.raises(AssumptionViolation):
        solve(uvm_call(), 4)
    res = solve(uvm_call(), 4, allow_override=True)
    assert not res.conforming and res.notes


def test_gate_blocks_large_step():
    pp = perturb(call_sharpe(), 0.05, sharpe_ref_vol(0.05))
    assert pp.wellposed.h0 < 0.5
    with pytest.raises(WellPosednessError):
        solve(pp.lift, 2, engine="regress1", paths=1000, wellposed=pp.wellposed)
    res = solve(pp.lift, 2, engine="regress1", paths=1000, wellposed=pp.wellposed,
                allow_override=True)
    assert not res.conforming


def test_exponential_payoff_stays_finite():
    pp = perturb(call_sharpe(), 0.1, sharpe_ref_vol(0.1))
    res = solve(pp.lift, 4, engine="regress1", paths=20_000, wellposed=pp.wellposed)
    assert np.isfinite(res.y0)
    assert 0 < res.y0 < 5
    assert np.isfinite(res.bootstrap_stderr())


def test_regression_close_to_oracle_on_bs():
    lift = bs_call()
    oracle = solve(lift, 4).y0
    res = solve(lift, 4, engine="regress1", paths=50_000, seed=3)
    assert abs(res.y0 - oracle) <= max(3 * res.bootstrap_stderr(), 0.01 * oracle)


def test_quadrature_engine_config_is_used():
    lift = bs_call()
    a = solve(lift, 4, quadrature=QuadratureEngine(nodes=32)).y0
    b = solve(lift, 4).y0
    assert a != b
    assert a == pytest.approx(b, rel=1e-3)
