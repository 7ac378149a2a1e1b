"""Controlled discrete-time semimartingales and strategy values.

A strategy picks a control index at each step from the lifted state.  The
controlled process advances by inverse-CDF draws from the step density
(``X_{k+1} = X_k + H_h(..., U_{k+1})``) and collects ``h L`` along the way
plus the terminal reward.  :func:`brute_force_value` is the global
optimization over lattice strategies by dynamic programming, against which the
scheme's value can be compared exactly.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionUnsupported, SizeLimitExceeded, StrategyUnavailable
from .kernel import StepDensityParams, density_eval, sample_increments
from .model import MarkovLift
from .scheme import (BLOCK_SIZE, Lattice, LatticeFunction, SchemeResult, block_rng,
                     driver_values, gh_rule, step_coefficients)

CONTROL_STREAM = 1

MAX_STEPS = 3
MAX_NODES = 31
MAX_CONTROLS = 4


class Strategy:
    """Rule ``(k, x, s) -> control indices`` on batches of lifted states."""

    def __call__(self, k: int, x: np.ndarray, s: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantStrategy(Strategy):
    index: int = 0

    def __call__(self, k, x, s):
        return np.full(x.shape[0], self.index, dtype=int)


@dataclass(frozen=True)
class CallableStrategy(Strategy):
    fn: Callable

    def __call__(self, k, x, s):
        return np.broadcast_to(np.asarray(self.fn(k, x, s), dtype=int), (x.shape[0],)).copy()


@dataclass(frozen=True)
class LatticePlan(Strategy):
    """Per-step control choice on a 1-d state lattice (nearest node).

    ``choices[k]`` holds one control index per lattice node for ``k >= 1``;
    ``choices[0]`` holds the single choice at the initial state.  ``values``
    optionally carries the value table the plan was derived from.
    """

    lattice: Lattice
    choices: tuple
    values: tuple | None = None

    def __post_init__(self):
        if self.lattice.s is not None:
            raise DimensionUnsupported("lattice plans need a one-dimensional lattice")
        for k, c in enumerate(self.choices):
            expect = 1 if k == 0 else self.lattice.x.size
            if np.asarray(c).shape != (expect,):
                raise ValueError(f"step {k}: expected {expect} choices")
        if self.values is not None and not all(np.all(np.isfinite(v)) for v in self.values):
            raise ValueError("value table must be finite")

    def node_index(self, x) -> np.ndarray:
        xs = self.lattice.x
        x = np.asarray(x, dtype=float).reshape(-1)
        i = np.clip(np.searchsorted(xs, x), 1, xs.size - 1)
        return np.where(np.abs(x - xs[i - 1]) <= np.abs(xs[i] - x), i - 1, i)

    def __call__(self, k, x, s):
        c = np.asarray(self.choices[k], dtype=int)
        if k == 0:
            return np.full(x.shape[0], c[0], dtype=int)
        return c[self.node_index(x[:, 0])]


class ExtractedStrategy(Strategy):
    """Driver argmax replayed from a scheme run's estimates of ``Z_k`` and ``Gamma_k``."""

    def __init__(self, result: SchemeResult, interp: str = "linear"):
        if result.steps is None or result.lift is None:
            raise StrategyUnavailable("scheme result retained no per-step estimates")
        self.result = result
        self.lift = result.lift
        self.interp = interp
        self._oracle = result.engine == "oracle"
        self._fns = {}
        if self._oracle:
            for k, st in enumerate(result.steps):
                if k and st.lattice is not None:
                    self._fns[k] = (LatticeFunction(st.lattice, st.z, interp),
                                    LatticeFunction(st.lattice, st.gamma, interp))

    def estimates(self, k, x, s):
        """``(z, gamma)`` of shape ``(M, d)`` and ``(M, d, d)`` at the given states."""
        st = self.result.steps[k]
        m = x.shape[0]
        if self._oracle:
            if k == 0:
                return (np.full((m, 1), st.z[0]), np.full((m, 1, 1), st.gamma[0]))
            fz, fg = self._fns[k]
            sc = s if s.shape[1] else None
            return fz(x, sc)[:, None], fg(x, sc)[:, None, None]
        states = np.concatenate([x, s], axis=1)
        return st.z_at(states), st.gamma_at(states)

    def __call__(self, k, x, s):
        z, g = self.estimates(k, x, s)
        coefs = step_coefficients(self.lift, k * self.result.h, x, s, k)
        return driver_values(coefs, g, z, k)[1]


def extract_strategy(result: SchemeResult, interp: str = "linear") -> Strategy:
    """Strategy realizing the scheme's driver argmax at every visited state.

    A singleton control grid gives the constant strategy.
    """
    if result.lift is not None and len(result.lift.controls) == 1:
        return ConstantStrategy(0)
    return ExtractedStrategy(result, interp)


@dataclass
class ControlledSample:
    mean: float
    stderr: float
    rewards: np.ndarray
    x: np.ndarray
    control_counts: np.ndarray


def _controlled_block(lift, strategy, n, h, seed, block, size):
    rng = block_rng(seed, block, CONTROL_STREAM)
    u01 = rng.random((size, n))
    x, s = lift.initial_state(size)
    xs = np.empty((size, n + 1))
    xs[:, 0] = x[:, 0]
    reward = np.zeros(size)
    E = len(lift.controls)
    counts = np.zeros((n, E), dtype=int)
    rows = np.arange(size)
    for k in range(n):
        t = k * h
        idx = np.asarray(strategy(k, x, s), dtype=int)
        if idx.shape != (size,) or idx.min() < 0 or idx.max() >= E:
            raise ValueError(f"strategy returned invalid control indices at step {k}")
        counts[k] = np.bincount(idx, minlength=E)
        coefs = step_coefficients(lift, t, x, s, k)
        a0 = coefs.sigma0[:, 0, 0] ** 2
        a_u = coefs.a[idx, rows, 0, 0]
        b_u = coefs.b[idx, rows, 0]
        reward += h * coefs.ell[idx, rows]
        r = sample_increments(a0, a_u, b_u, h, u01[:, k])
        x = x + r[:, None]
        s = np.asarray(lift.update(s, x, h)).reshape(size, lift.dim_s)
        xs[:, k + 1] = x[:, 0]
    reward += np.asarray(lift.terminal_reward(x, s), dtype=float)
    return reward, xs, counts


def simulate_controlled(lift: MarkovLift, strategy: Strategy, n: int, M: int,
                        seed: int = 0, workers: int = 1) -> ControlledSample:
    """Simulate the controlled process under ``strategy`` and estimate its value.

    Uniforms come from counter-based per-block streams, so results depend
    only on ``(seed, M, n)``.
    """
    if lift.dim_x != 1:
        raise DimensionUnsupported("controlled simulation samples the step density in d = 1 only")
    h = lift.horizon / n
    sizes = [min(BLOCK_SIZE, M - b * BLOCK_SIZE) for b in range((M + BLOCK_SIZE - 1) // BLOCK_SIZE)]

    def job(b):
        return _controlled_block(lift, strategy, n, h, seed, b, sizes[b])

    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, range(len(sizes))))
    else:
        parts = [job(b) for b in range(len(sizes))]
    rewards = np.concatenate([p[0] for p in parts])
    xs = np.concatenate([p[1] for p in parts])
    counts = sum(p[2] for p in parts)
    se = float(rewards.std(ddof=1) / np.sqrt(rewards.size)) if rewards.size > 1 else 0.0
    return ControlledSample(float(rewards.mean()), se, rewards, xs, counts)


# --------------------------------------------------------------------------
# lattice dynamic programming


@dataclass
class BruteForceResult:
    value: float
    plan: LatticePlan
    q_tables: list        # q_tables[k] has shape (nodes, controls)


def _check_sizes(lift: MarkovLift, n: int, lattice: Lattice):
    if lift.dim_x != 1 or lift.dim_s != 0 or lattice.s is not None:
        raise SizeLimitExceeded("brute force needs d = 1 without companion state")
    if n > MAX_STEPS:
        raise SizeLimitExceeded(f"n = {n} exceeds {MAX_STEPS}")
    if lattice.x.size > MAX_NODES:
        raise SizeLimitExceeded(f"{lattice.x.size} lattice nodes exceed {MAX_NODES}")
    if len(lift.controls) > MAX_CONTROLS:
        raise SizeLimitExceeded(f"{len(lift.controls)} controls exceed {MAX_CONTROLS}")


def _q_values(lift, t, xk, v_next, h, nodes, k):
    """Transition expectations ``h L + E[V(x + R)]`` against the step density, per control."""
    coefs = step_coefficients(lift, t, xk, np.zeros((xk.shape[0], 0)), k)
    xi, w = gh_rule(nodes)
    sig0 = coefs.sigma0[:, 0, 0]
    E = len(lift.controls)
    q = np.empty((xk.shape[0], E))
    for p in range(xk.shape[0]):
        r = sig0[p] * np.sqrt(h) * xi
        vals = v_next(xk[p, 0] + r)
        gauss = np.exp(-0.5 * xi * xi) / (sig0[p] * np.sqrt(2 * np.pi * h))
        a0 = np.array([[sig0[p] ** 2]])
        for e in range(E):
            params = StepDensityParams(a0, coefs.a[e, p], coefs.b[e, p], h)
            ratio = density_eval(params, r) / gauss
            q[p, e] = h * coefs.ell[e, p] + np.dot(w, vals * ratio)
    return q


def lattice_dp(lift: MarkovLift, n: int, lattice: Lattice, nodes: int = 64,
               interp: str = "cubic", policy: Callable | None = None):
    """Backward dynamic programming over (node, control) on a fixed lattice.

    With ``policy=None`` each node takes the best control; otherwise
    ``policy(k, x_nodes) -> indices`` fixes the choice.  Returns
    ``(value, choices, values, q_tables)``.
    """
    h = lift.horizon / n
    v_next = lambda x: np.asarray(  # noqa: E731
        lift.terminal_reward(np.asarray(x, dtype=float).reshape(-1, 1), np.zeros((np.size(x), 0))),
        dtype=float)
    choices, values, qs = [None] * n, [None] * n, [None] * n
    for k in range(n - 1, -1, -1):
        xk = lift.initial_state(1)[0] if k == 0 else lattice.x[:, None]
        q = _q_values(lift, k * h, xk, v_next, h, nodes, k)
        if policy is None:
            c = np.argmax(q, axis=1)
        else:
            c = np.asarray(policy(k, xk), dtype=int).reshape(xk.shape[0])
        v = q[np.arange(q.shape[0]), c]
        choices[k], values[k], qs[k] = c, v, q
        if k:
            v_next = LatticeFunction(lattice, v, interp)
    return float(values[0][0]), choices, values, qs


def brute_force_value(lift: MarkovLift, n: int, lattice: Lattice, nodes: int = 64,
                      interp: str = "cubic") -> BruteForceResult:
    """Optimal value over lattice strategies, by dynamic programming.

    Transition expectations integrate the next value against the step
    density itself (Gauss-Hermite nodes, density ratio to the Gaussian),
    not through the scheme's weights.  Limited to ``n <= 3``, ``<= 31``
    nodes and ``<= 4`` controls.
    """
    _check_sizes(lift, n, lattice)
    value, choices, values, qs = lattice_dp(lift, n, lattice, nodes, interp)
    plan = LatticePlan(lattice, tuple(choices), tuple(values))
    return BruteForceResult(value, plan, qs)


def plan_value(lift: MarkovLift, n: int, plan: LatticePlan, nodes: int = 64,
               interp: str = "cubic") -> float:
    """Value of a fixed lattice plan under the same DP discretization."""
    _check_sizes(lift, n, plan.lattice)
    return lattice_dp(lift, n, plan.lattice, nodes, interp,
                      policy=lambda k, xk: plan.choices[k])[0]
