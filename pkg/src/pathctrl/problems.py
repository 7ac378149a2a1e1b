"""Builtin problems and closed-form reference prices.

All builtins use zero interest rates and are returned as validated
:class:`~pathctrl.model.MarkovLift` objects.

``bs-call``
    Singleton control, ``dS = 0.2 S dW`` simulated in price space, call payoff.
``uvm-call``
    Uncertain volatility: variance grid on ``[0.01, 0.04]``, call payoff.
``call-sharpe``
    Variance option ``(S0 exp(X - V/2) - K)^+ / sqrt(V)`` on the degenerate
    pair ``(X, V)`` with ``dX = sqrt(u) dW`` and ``dV = u dt``; only solvable
    after :func:`pathctrl.degenerate.perturb`.
``asian-lift``
    Uncertain volatility on ``[0.04, 0.09]`` with an arithmetic-average call;
    the running sum is carried as a companion state.
"""
from __future__ import annotations

import numpy as np
from scipy.stats import norm

from .model import ControlGrid, ControlProblem, LiftSpec, MarkovLift, lift_problem, markov_spec
from .scheme import Lattice


def bs_call_price(s0: float, k: float, sigma: float, T: float) -> float:
    """Black-Scholes call price with zero rate."""
    if sigma * np.sqrt(T) == 0:
        return max(s0 - k, 0.0)
    v = sigma * np.sqrt(T)
    d1 = (np.log(s0 / k) + 0.5 * v * v) / v
    return float(s0 * norm.cdf(d1) - k * norm.cdf(d1 - v))


def _geometric_lattice(s0, vol_total, width=8.0, size=201):
    return np.exp(np.linspace(np.log(s0) - width * vol_total, np.log(s0) + width * vol_total, size))


def _price_lattice(s0, vol_total):
    def make(n, size):
        return Lattice(_geometric_lattice(s0, vol_total, size=size))
    return make


def _col(x, j=0):
    return x[:, j]


# --------------------------------------------------------------------------
# Markov (d' = 0) price models


def _local_vol_problem(name, s0, strike, horizon, controls, vol_of_u, ref_sigma, payoff):
    """Price model ``dS = vol_of_u(u) S dW`` with reference vol ``ref_sigma S``."""

    def drift(t, path, u):
        return np.zeros(1)

    def vol(t, path, u):
        return np.array([[vol_of_u(u) * path.eval(t)[0]]])

    def ref_vol(t, path):
        return np.array([[ref_sigma * path.eval(t)[0]]])

    def terminal(path):
        return float(payoff(path.eval(path.horizon)[0]))

    problem = ControlProblem(1, horizon, np.array([s0]), drift, vol,
                             lambda t, path, u: 0.0, terminal, controls, ref_vol, name=name)
    spec = markov_spec(
        drift=lambda t, x, s, u: np.zeros_like(x),
        vol=lambda t, x, s, u: (vol_of_u(u) * x)[:, :, None],
        running_reward=lambda t, x, s, u: np.zeros(x.shape[0]),
        terminal_reward=lambda x: payoff(_col(x)),
        ref_vol=lambda t, x: (ref_sigma * x)[:, :, None],
    )
    return problem, spec


def _call(strike):
    return lambda x: np.maximum(x - strike, 0.0)


def bs_call(s0: float = 100.0, strike: float = 100.0, sigma: float = 0.2,
            horizon: float = 1.0, validate: int = 20) -> MarkovLift:
    problem, spec = _local_vol_problem("bs-call", s0, strike, horizon, ControlGrid([sigma]),
                                       lambda u: u, sigma, _call(strike))
    return lift_problem(problem, spec, n_paths=validate,
                        lattice=_price_lattice(s0, sigma * np.sqrt(horizon)))


def uvm_call(s0: float = 100.0, strike: float = 100.0, var_lo: float = 0.01,
             var_hi: float = 0.04, controls: int = 7, ref_sigma: float | None = None,
             horizon: float = 1.0, validate: int = 20) -> MarkovLift:
    """Uncertain volatility call; controls are variances on ``[var_lo, var_hi]``.

    The default reference vol is ``sqrt(var_lo) S``, which keeps every
    ``a_u`` positive semidefinite.  With ``var_hi > 3 var_lo`` (the default
    range) the second well-posedness condition fails for the upper part of the
    grid, so solving requires the override.
    """
    ref = np.sqrt(var_lo) if ref_sigma is None else ref_sigma
    problem, spec = _local_vol_problem("uvm-call", s0, strike, horizon,
                                       ControlGrid.linspace(var_lo, var_hi, controls),
                                       np.sqrt, ref, _call(strike))
    return lift_problem(problem, spec, n_paths=validate,
                        lattice=_price_lattice(s0, np.sqrt(var_hi * horizon)))


def linear_martingale(x0: float = 1.0, sigma0: float = 0.3, horizon: float = 1.0) -> MarkovLift:
    """Singleton control, zero drift, ``sigma = sigma0`` constant, ``Phi = x_T``."""
    problem = ControlProblem(
        1, horizon, np.array([x0]), lambda t, p, u: np.zeros(1),
        lambda t, p, u: np.array([[sigma0]]), lambda t, p, u: 0.0,
        lambda p: float(p.eval(p.horizon)[0]), ControlGrid([0]),
        lambda t, p: np.array([[sigma0]]), name="linear")
    spec = markov_spec(
        drift=lambda t, x, s, u: np.zeros_like(x),
        vol=lambda t, x, s, u: np.full((x.shape[0], 1, 1), sigma0),
        running_reward=lambda t, x, s, u: np.zeros(x.shape[0]),
        terminal_reward=lambda x: x[:, 0].copy(),
        ref_vol=lambda t, x: np.full((x.shape[0], 1, 1), sigma0),
    )
    width = 10 * sigma0 * np.sqrt(horizon)
    return lift_problem(problem, spec, n_paths=5,
                        lattice=lambda n, size: Lattice(np.linspace(x0 - width, x0 + width, size)))


# --------------------------------------------------------------------------
# asian-lift


def asian_lift(s0: float = 100.0, strike: float = 100.0, var_lo: float = 0.04,
               var_hi: float = 0.09, controls: int = 6, ref_sigma: float = 0.2,
               horizon: float = 1.0, validate: int = 20) -> MarkovLift:
    """Arithmetic-average call under uncertain volatility.

    The average is the right-point sum ``A = sum_k h x_{k+1} / T`` and the
    companion state is the running sum ``s_{k+1} = s_k + h x_{k+1}``.
    """
    grid = ControlGrid.linspace(var_lo, var_hi, controls)

    def running_sum(path):
        return path.h * float(np.sum(path.nodes[1:path.filled_to + 1, 0]))

    problem = ControlProblem(
        1, horizon, np.array([s0]), lambda t, p, u: np.zeros(1),
        lambda t, p, u: np.array([[np.sqrt(u) * p.eval(t)[0]]]), lambda t, p, u: 0.0,
        lambda p: max(running_sum(p) / p.horizon - strike, 0.0), grid,
        lambda t, p: np.array([[ref_sigma * p.eval(t)[0]]]), name="asian-lift")
    spec = LiftSpec(
        dim_s=1, s0=[0.0],
        update=lambda s, x_next, h: s + h * x_next[:, :1],
        drift=lambda t, x, s, u: np.zeros_like(x),
        vol=lambda t, x, s, u: (np.sqrt(u) * x)[:, :, None],
        running_reward=lambda t, x, s, u: np.zeros(x.shape[0]),
        terminal_reward=lambda x, s: np.maximum(s[:, 0] / horizon - strike, 0.0),
        ref_vol=lambda t, x, s: (ref_sigma * x)[:, :, None],
    )
    width = np.sqrt(var_hi * horizon)

    def lattice(n, size):
        xs = _geometric_lattice(s0, ref_sigma * np.sqrt(horizon), width=7.0, size=size)
        ss = np.linspace(0.0, horizon * s0 * np.exp(4 * width), 101)
        return Lattice(xs, ss)

    return lift_problem(problem, spec, n_paths=validate, lattice=lattice)


# --------------------------------------------------------------------------
# call-sharpe


def call_sharpe(s0: float = 1.0, strike: float = 1.0, var_lo: float = 0.04,
                var_hi: float = 0.09, controls: int = 6, horizon: float = 1.0,
                validate: int = 20) -> MarkovLift:
    """Variance option on ``(X, V - u_mid t)``, degenerate in the second coordinate.

    The second state coordinate is centered by the mid variance ``u_mid`` so
    its drift ``u - u_mid`` is small.  The realized variance fed to the
    payoff is clipped to ``[var_lo T, var_hi T]``, its attainable range.
    The reference vol here is only a placeholder (the pair is degenerate);
    use :func:`pathctrl.degenerate.perturb` before solving.
    """
    grid = ControlGrid.linspace(var_lo, var_hi, controls)
    mid = 0.5 * (var_lo + var_hi)

    def payoff(xv, vt):
        v = np.clip(vt, var_lo * horizon, var_hi * horizon)
        return np.maximum(s0 * np.exp(xv - 0.5 * v) - strike, 0.0) / np.sqrt(v)

    def p_drift(t, p, u):
        return np.array([0.0, u - mid])

    def p_vol(t, p, u):
        return np.array([[np.sqrt(u), 0.0], [0.0, 0.0]])

    problem = ControlProblem(
        2, horizon, np.zeros(2), p_drift, p_vol, lambda t, p, u: 0.0,
        lambda p: float(payoff(p.eval(p.horizon)[0], p.eval(p.horizon)[1] + mid * p.horizon)),
        grid, lambda t, p: np.sqrt(var_lo) * np.eye(2), name="call-sharpe")

    def vol(t, x, s, u):
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 0] = np.sqrt(u)
        return out

    spec = markov_spec(
        drift=lambda t, x, s, u: np.broadcast_to([0.0, u - mid], x.shape).copy(),
        vol=vol,
        running_reward=lambda t, x, s, u: np.zeros(x.shape[0]),
        terminal_reward=lambda x: payoff(x[:, 0], x[:, 1] + mid * horizon),
        ref_vol=lambda t, x: np.broadcast_to(np.sqrt(var_lo) * np.eye(2), (x.shape[0], 2, 2)).copy(),
    )
    return lift_problem(problem, spec, n_paths=validate)


def sharpe_ref_vol(eps: float, var_lo: float = 0.04, rho: float = 1.35):
    """Reference vol for the perturbed call-sharpe problem.

    ``diag(sqrt(var_lo + eps^2), eps / sqrt(rho))``: the first entry makes
    ``a_u`` vanish at the lowest variance; the second keeps ``a_u`` strictly
    positive in the variance coordinate so the drift ``u - u_mid`` lies in its
    range (the plain ``eps I`` choice would give ``m_G = -inf``).
    """
    diag = np.array([np.sqrt(var_lo + eps * eps), eps / np.sqrt(rho)])

    def ref(t, x, s):
        return np.broadcast_to(np.diag(diag), (x.shape[0], 2, 2)).copy()

    return ref


def _linear(**kw):
    return linear_martingale(**kw)


BUILTINS = {
    "bs-call": bs_call,
    "uvm-call": uvm_call,
    "call-sharpe": call_sharpe,
    "asian-lift": asian_lift,
    "linear": _linear,
}

# reference-vol factories ``eps -> ref_vol`` used when perturbing a builtin
PERTURB_REF = {"call-sharpe": sharpe_ref_vol}


def reference_value(name: str, **kwargs) -> float | None:
    """Closed-form value of a builtin, where one is known."""
    s0 = kwargs.get("s0", 100.0)
    strike = kwargs.get("strike", 100.0)
    horizon = kwargs.get("horizon", 1.0)
    if name == "bs-call":
        return bs_call_price(s0, strike, kwargs.get("sigma", 0.2), horizon)
    if name == "uvm-call":
        # convex payoff: the maximal volatility is optimal
        return bs_call_price(s0, strike, np.sqrt(kwargs.get("var_hi", 0.04)), horizon)
    if name == "linear":
        return kwargs.get("x0", 1.0)
    return None


def builtin(name: str, **kwargs) -> MarkovLift:
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(BUILTINS)}") from None
    return factory(**kwargs)
