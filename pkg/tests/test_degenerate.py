import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import additive_lift, call
from pathctrl.degenerate import epsilon_sweep, fit_linear, perturb, perturbed_vol, sym_sqrt
from pathctrl.errors import AssumptionViolation
from pathctrl.model import ControlGrid, ControlProblem, PathGrid
from pathctrl.problems import call_sharpe, sharpe_ref_vol


def test_zero_vol_gives_eps_identity():
    np.testing.assert_allclose(perturbed_vol(np.zeros((3, 3)), 0.1), 0.1 * np.eye(3), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.floats(1e-3, 1.0), st.integers(0, 2**31))
def test_sqrt_properties_and_floor(d, eps, seed):
    rng = np.random.default_rng(seed)
    sig = rng.normal(size=(d, d))
    sig[0] = 0.0  # degenerate row
    se = perturbed_vol(sig, eps)
    np.testing.assert_allclose(se, se.T, atol=1e-14)
    target = sig @ sig.T + eps * eps * np.eye(d)
    np.testing.assert_allclose(se @ se, target, atol=1e-10 * max(1.0, np.abs(target).max()))
    assert np.linalg.eigvalsh(se @ se.T).min() >= eps * eps - 1e-12
    assert np.linalg.eigvalsh(se).min() >= 0


def test_sym_sqrt_clamps_roundoff():
    a = np.array([[1.0, 1.0], [1.0, 1.0]]) + np.diag([0.0, -1e-15])
    r = sym_sqrt(a)
    assert np.all(np.isfinite(r))
    np.testing.assert_allclose(r @ r, [[1, 1], [1, 1]], atol=1e-7)


def test_batched_sqrt():
    sig = np.random.default_rng(1).normal(size=(5, 2, 2))
    out = perturbed_vol(sig, 0.2)
    for i in range(5):
        np.testing.assert_allclose(out[i], perturbed_vol(sig[i], 0.2), atol=1e-14)


def test_degenerate_pair_becomes_active():
    pp = perturb(call_sharpe(), 0.1, sharpe_ref_vol(0.1))
    x = np.zeros((1, 2))
    u = pp.lift.controls[2]
    sig = pp.lift.vol(0.0, x, np.zeros((1, 0)), u)[0]
    assert np.all(np.abs(sig).sum(axis=1) > 0)
    assert pp.conforming and pp.wellposed.m_g > -np.inf


def test_default_reference_is_rejected_for_call_sharpe():
    # eps I reference: the drift of the variance coordinate is outside the range of a_u
    with pytest.raises(AssumptionViolation):
        perturb(call_sharpe(), 0.1)
    pp = perturb(call_sharpe(), 0.1, strict=False)
    assert not pp.conforming and pp.wellposed.m_g == -np.inf


def test_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        perturb(call_sharpe(), 0.0)


def test_bare_problem_perturbation():
    problem = ControlProblem(
        1, 1.0, [0.0], lambda t, p, u: np.array([0.0]), lambda t, p, u: np.array([[0.0]]),
        lambda t, p, u: 0.0, lambda p: 0.0, ControlGrid([0]), lambda t, p: np.array([[1.0]]))
    pp = perturb(problem, 0.3)
    path = PathGrid.from_nodes(np.zeros(3), 1.0)
    assert pp.lift is None
    np.testing.assert_allclose(pp.problem.vol(0.0, path, 0), [[0.3]])
    np.testing.assert_allclose(pp.problem.ref_vol(0.0, path), [[0.3]])
    assert pp.wellposed.m_g == 0.0 and pp.wellposed.h0 == 1.0


def test_h0_stable_under_grid_refinement():
    h0 = [perturb(call_sharpe(controls=c), 0.1, sharpe_ref_vol(0.1)).wellposed.h0
          for c in (3, 6, 11, 21)]
    assert min(h0) > 0.5
    assert max(h0) - min(h0) < 1e-12


def test_fit_linear():
    fit = fit_linear([0.0, 1.0, 2.0], [1.0, 3.0, 5.0])
    assert fit.slope == pytest.approx(2.0) and fit.intercept == pytest.approx(1.0)
    assert fit.r2 == pytest.approx(1.0)


def test_sweep_on_nondegenerate_problem_tracks_closed_form():
    lift = additive_lift([0.04], 0.2, call(0.0))
    rows, fit = epsilon_sweep(lift, [0.01, 0.02, 0.04], 4,
                              ref_vol_for=lambda e: lambda t, x, s: np.full((x.shape[0], 1, 1),
                                                                              np.sqrt(0.04 + e * e)))
    assert [r.epsilon for r in rows] == [0.01, 0.02, 0.04]
    assert all(r.conforming for r in rows)
    # additive ATM call: value sqrt(v / 2 pi) with v = 0.04 + eps^2
    for r in rows:
        assert r.y0 == pytest.approx(np.sqrt((0.04 + r.epsilon ** 2) / (2 * np.pi)), rel=1e-2)
    assert 0 < fit.slope < 0.1
