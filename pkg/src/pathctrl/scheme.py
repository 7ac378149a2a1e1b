"""Backward induction along the reference process.

``Y_n = Phi`` and, for ``k = n-1, ..., 0``,

    Y_k = E_k[Y_{k+1}] + h G(t_k, x, s, Gamma_k, Z_k)

where ``Z_k`` and ``Gamma_k`` are conditional expectations of ``Y_{k+1}``
times the Gaussian weights and ``G`` is the finite max over the control grid.
Conditional expectations come from one of two engines: a Gauss-Hermite
quadrature oracle on a state lattice (small state dimension, used as ground
truth) or simulation-regression (see :mod:`pathctrl.regression`).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.interpolate import CubicSpline, RectBivariateSpline

from .errors import (AssumptionViolation, EngineUnsupported, EvaluationError,
                     WellPosednessError)
from .kernel import WellPosedness, well_posedness
from .model import MarkovLift, PathGrid

BLOCK_SIZE = 4096


# --------------------------------------------------------------------------
# reference process


@dataclass
class ReferenceEnsemble:
    """Simulated reference paths with the increments and vols used for weights."""

    x: np.ndarray        # (M, n+1, d)
    s: np.ndarray        # (M, n+1, dim_s)
    dW: np.ndarray       # (M, n, d)
    sigma0: np.ndarray   # (M, n, d, d)
    h: float
    seed: int

    @property
    def n(self) -> int:
        return self.dW.shape[1]

    @property
    def paths(self) -> int:
        return self.x.shape[0]

    def states(self, k: int) -> np.ndarray:
        return np.concatenate([self.x[:, k], self.s[:, k]], axis=1)

    def path_grids(self, count: int | None = None, horizon: float | None = None) -> list[PathGrid]:
        count = self.paths if count is None else min(count, self.paths)
        horizon = self.h * self.n if horizon is None else horizon
        return [PathGrid.from_nodes(self.x[m], horizon) for m in range(count)]


def block_rng(seed: int, block: int, stream: int = 0) -> np.random.Generator:
    """Counter-based stream for one fixed-size block of paths.

    ``stream`` separates independent uses of the same seed (0 is the
    reference process).
    """
    key = [int(seed), int(block)] + ([int(stream)] if stream else [])
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def _simulate_block(lift: MarkovLift, n: int, h: float, seed: int, block: int, size: int):
    d, ds = lift.dim_x, lift.dim_s
    rng = block_rng(seed, block)
    dW = rng.standard_normal((size, n, d)) * np.sqrt(h)
    x = np.empty((size, n + 1, d))
    s = np.empty((size, n + 1, ds))
    sig = np.empty((size, n, d, d))
    x[:, 0], s[:, 0] = lift.initial_state(size)
    for k in range(n):
        t = k * h
        sk = np.asarray(lift.ref_vol(t, x[:, k], s[:, k]), dtype=float).reshape(size, d, d)
        sig[:, k] = sk
        x[:, k + 1] = x[:, k] + np.einsum("mij,mj->mi", sk, dW[:, k])
        s[:, k + 1] = np.asarray(lift.update(s[:, k], x[:, k + 1], h)).reshape(size, ds)
    return x, s, dW, sig


def simulate_reference(lift: MarkovLift, n: int, M: int, seed: int = 0,
                       workers: int = 1) -> ReferenceEnsemble:
    """Simulate ``M`` reference paths ``X_{k+1} = X_k + sigma0 dW_{k+1}``.

    Paths are generated in blocks of ``BLOCK_SIZE`` with one counter-based
    stream per block, so the ensemble depends only on ``(seed, M, n)`` and not
    on ``workers``.
    """
    if n < 1 or M < 1:
        raise ValueError("need n >= 1 and M >= 1")
    h = lift.horizon / n
    sizes = [min(BLOCK_SIZE, M - b * BLOCK_SIZE) for b in range((M + BLOCK_SIZE - 1) // BLOCK_SIZE)]

    def job(b):
        return _simulate_block(lift, n, h, seed, b, sizes[b])

    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, range(len(sizes))))
    else:
        parts = [job(b) for b in range(len(sizes))]
    x, s, dW, sig = (np.concatenate(p, axis=0) for p in zip(*parts))
    return ReferenceEnsemble(x, s, dW, sig, h, seed)


# --------------------------------------------------------------------------
# driver


@dataclass(frozen=True)
class DriverInput:
    t_index: int
    state: tuple
    gamma: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        if not np.allclose(g, g.T, atol=1e-12, rtol=0):
            raise ValueError("gamma must be symmetric")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "z", np.atleast_1d(np.asarray(self.z, dtype=float)))


@dataclass
class StepCoefficients:
    """Per-control coefficients at one time over a batch of states."""

    a: np.ndarray        # (E, M, d, d)  sigma sigma^T - a0
    b: np.ndarray        # (E, M, d)
    ell: np.ndarray      # (E, M)
    sigma0: np.ndarray   # (M, d, d)


def step_coefficients(lift: MarkovLift, t: float, x: np.ndarray, s: np.ndarray,
                      t_index: int | None = None) -> StepCoefficients:
    m, d = x.shape
    sig0 = np.asarray(lift.ref_vol(t, x, s), dtype=float).reshape(m, d, d)
    a0 = sig0 @ np.swapaxes(sig0, -1, -2)
    E = len(lift.controls)
    a = np.empty((E, m, d, d))
    b = np.empty((E, m, d))
    ell = np.empty((E, m))
    for ui, u in enumerate(lift.controls):
        sig = np.asarray(lift.vol(t, x, s, u), dtype=float).reshape(m, d, d)
        a[ui] = sig @ np.swapaxes(sig, -1, -2) - a0
        b[ui] = np.asarray(lift.drift(t, x, s, u), dtype=float).reshape(m, d)
        ell[ui] = np.broadcast_to(np.asarray(lift.running_reward(t, x, s, u), dtype=float), (m,))
        if not (np.all(np.isfinite(a[ui])) and np.all(np.isfinite(b[ui]))
                and np.all(np.isfinite(ell[ui]))):
            raise EvaluationError("coefficient", ui, t_index)
    return StepCoefficients(a, b, ell, sig0)


def driver_values(coefs: StepCoefficients, gamma: np.ndarray, z: np.ndarray,
                  t_index: int | None = None):
    """``max_u [L + a_u.gamma/2 + b_u.z]`` per state; returns ``(values, argmax)``.

    ``gamma`` has shape ``(M, d, d)`` and ``z`` shape ``(M, d)``.  Ties go to the
    first control index.
    """
    cand = (coefs.ell + 0.5 * np.einsum("emij,mij->em", coefs.a, gamma)
            + np.einsum("emi,mi->em", coefs.b, z))
    bad = ~np.isfinite(cand)
    if np.any(bad):
        raise EvaluationError("driver value", int(np.argwhere(bad)[0, 0]), t_index)
    arg = np.argmax(cand, axis=0)
    return cand[arg, np.arange(cand.shape[1])], arg


def driver_G(lift: MarkovLift, inp: DriverInput, h: float):
    """Driver value and maximizing control at one lifted state."""
    x = np.atleast_1d(np.asarray(inp.state[0], dtype=float))[None, :]
    s_raw = inp.state[1] if len(inp.state) > 1 else np.zeros(0)
    s = np.atleast_1d(np.asarray(s_raw, dtype=float)).reshape(1, lift.dim_s)
    coefs = step_coefficients(lift, inp.t_index * h, x, s, inp.t_index)
    val, arg = driver_values(coefs, inp.gamma[None], inp.z[None], inp.t_index)
    return float(val[0]), lift.controls[int(arg[0])]


# --------------------------------------------------------------------------
# lattice and quadrature oracle


@dataclass(frozen=True)
class Lattice:
    x: np.ndarray
    s: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 1 or x.size < 2 or np.any(np.diff(x) <= 0):
            raise ValueError("lattice nodes must be strictly increasing")
        object.__setattr__(self, "x", x)
        if self.s is not None:
            s = np.asarray(self.s, dtype=float)
            if s.ndim != 1 or s.size < 2 or np.any(np.diff(s) <= 0):
                raise ValueError("companion lattice must be strictly increasing")
            object.__setattr__(self, "s", s)

    @property
    def shape(self):
        return (self.x.size,) if self.s is None else (self.x.size, self.s.size)

    def points(self):
        """Lattice nodes as ``(x, s)`` batches of shape ``(N, 1)`` and ``(N, dim_s)``."""
        if self.s is None:
            return self.x[:, None], np.zeros((self.x.size, 0))
        xx, ss = np.meshgrid(self.x, self.s, indexing="ij")
        return xx.reshape(-1, 1), ss.reshape(-1, 1)


class LatticeFunction:
    """Interpolant of node values; linear extrapolation in 1-d, clamping in 2-d."""

    def __init__(self, lattice: Lattice, values, kind: str = "cubic"):
        self.lattice = lattice
        self.kind = kind
        v = np.asarray(values, dtype=float).reshape(lattice.shape)
        self.values = v
        x = lattice.x
        if lattice.s is None:
            if kind == "cubic":
                self._spline = CubicSpline(x, v, bc_type="natural")
                self._slopes = (self._spline(x[0], 1), self._spline(x[-1], 1))
            elif kind == "linear":
                self._spline = None
                self._slopes = ((v[1] - v[0]) / (x[1] - x[0]), (v[-1] - v[-2]) / (x[-1] - x[-2]))
            else:
                raise ValueError(f"unknown interpolation {kind!r}")
        else:
            k = 3 if kind == "cubic" else 1
            if kind not in ("cubic", "linear"):
                raise ValueError(f"unknown interpolation {kind!r}")
            self._spline = RectBivariateSpline(x, lattice.s, v, kx=k, ky=k, s=0)

    def __call__(self, x, s=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            x = x[:, 0]
        lat = self.lattice
        if lat.s is None:
            lo, hi = lat.x[0], lat.x[-1]
            xc = np.clip(x, lo, hi)
            if self._spline is None:
                inner = np.interp(xc, lat.x, self.values)
            else:
                inner = self._spline(xc)
            return inner + np.where(x < lo, (x - lo) * self._slopes[0], 0.0) + np.where(
                x > hi, (x - hi) * self._slopes[1], 0.0)
        s = np.asarray(s, dtype=float)
        if s.ndim == 2:
            s = s[:, 0]
        xc = np.clip(x, lat.x[0], lat.x[-1])
        sc = np.clip(s, lat.s[0], lat.s[-1])
        return self._spline.ev(xc, sc)


@lru_cache(maxsize=16)
def _gh_cached(nodes: int):
    xi, w = hermegauss(nodes)
    xi.flags.writeable = False
    w = w / w.sum()
    w.flags.writeable = False
    return xi, w


def gh_rule(nodes: int):
    """Probabilists' Gauss-Hermite nodes and weights normalized to sum to one."""
    return _gh_cached(int(nodes))


def quadrature_engine(y_next: Callable, x, sigma0, h: float, s=None,
                      update: Callable | None = None, nodes: int = 64):
    """Gauss-Hermite estimates of ``E[Y']``, ``Z`` and ``Gamma`` at states ``x``.

    ``y_next(x, s)`` evaluates ``Y_{k+1}`` on batches ``x`` of shape ``(P, 1)``;
    ``sigma0`` holds the reference vol at each state.  The companion state of
    each quadrature node is ``update(s, x', h)``.  One-dimensional ``x`` only.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != 1:
        raise EngineUnsupported("quadrature oracle needs a one-dimensional state")
    npts = x.shape[0]
    sig = np.asarray(sigma0, dtype=float).reshape(npts)
    if s is None:
        s = np.zeros((npts, 0))
    s = np.asarray(s, dtype=float).reshape(npts, -1)
    xi, w = gh_rule(nodes)
    sq = np.sqrt(h)
    xq = x[:, 0:1] + sig[:, None] * sq * xi[None, :]            # (P, Q)
    xq_flat = xq.reshape(-1, 1)
    s_rep = np.repeat(s, xi.size, axis=0)
    sq_flat = update(s_rep, xq_flat, h) if (update is not None and s.shape[1]) else s_rep
    yq = np.asarray(y_next(xq_flat, sq_flat), dtype=float).reshape(npts, xi.size)
    ey = yq @ w
    z = (yq @ (w * xi)) / (sig * sq)
    gamma = (yq @ (w * (xi * xi - 1.0))) / (h * sig * sig)
    return ey, z, gamma


@dataclass(frozen=True)
class QuadratureEngine:
    nodes: int = 64
    lattice: Lattice | None = None
    size: int = 201
    size_s: int = 41
    interp: str = "cubic"
    pilot_paths: int = 2000
    pilot_seed: int = 12345


def default_lattice(lift: MarkovLift, n: int, size: int = 201, size_s: int = 41,
                    pilot_paths: int = 2000, seed: int = 12345) -> Lattice:
    """Lattice from the lift's hint, else spanning a pilot reference ensemble."""
    if lift.lattice is not None:
        return lift.lattice(n, size)
    ens = simulate_reference(lift, n, pilot_paths, seed)

    def span(v, count):
        lo, hi = float(v.min()), float(v.max())
        pad = 0.25 * (hi - lo) if hi > lo else 1.0
        return np.linspace(lo - pad, hi + pad, count)

    xs = span(ens.x[:, 1:, 0], size)
    ss = span(ens.s[:, 1:, 0], size_s) if lift.dim_s else None
    return Lattice(xs, ss)


@dataclass
class OracleStep:
    lattice: Lattice
    y: np.ndarray
    z: np.ndarray
    gamma: np.ndarray
    argmax: np.ndarray


def oracle_backward(lift: MarkovLift, n: int, engine: QuadratureEngine):
    """Run the scheme with the quadrature oracle; returns ``(y0, steps)``.

    ``steps[k]`` holds lattice values of ``Y_k, Z_k, Gamma_k`` and the driver's
    argmax for ``k >= 1``; ``steps[0]`` is evaluated at the initial state only.
    """
    if lift.dim_x != 1 or lift.dim_s > 1:
        raise EngineUnsupported("quadrature oracle supports d = 1 with at most one companion state")
    h = lift.horizon / n
    lattice = engine.lattice or default_lattice(lift, n, engine.size, engine.size_s,
                                                engine.pilot_paths, engine.pilot_seed)
    if (lattice.s is None) != (lift.dim_s == 0):
        raise EngineUnsupported("lattice dimension does not match the lift")
    y_next = lambda xq, sq: lift.terminal_reward(xq, sq)  # noqa: E731
    steps: list[OracleStep | None] = [None] * n
    for k in range(n - 1, -1, -1):
        t = k * h
        if k == 0:
            xk, sk = lift.initial_state(1)
        else:
            xk, sk = lattice.points()
        coefs = step_coefficients(lift, t, xk, sk, k)
        ey, z, gamma = quadrature_engine(y_next, xk, coefs.sigma0[:, 0, 0], h, sk,
                                         lift.update, engine.nodes)
        g, arg = driver_values(coefs, gamma[:, None, None], z[:, None], k)
        y = ey + h * g
        if not np.all(np.isfinite(y)):
            raise EvaluationError("value", None, k)
        steps[k] = OracleStep(lattice if k else None, y, z, gamma, arg)
        if k:
            y_next = LatticeFunction(lattice, y, engine.interp)
    return float(steps[0].y[0]), steps


# --------------------------------------------------------------------------
# top level


@dataclass(frozen=True)
class SchemeConfig:
    n: int
    engine: str = "oracle"            # oracle | regress1 | regress2
    paths: int = 100_000
    seed: int = 0
    basis: Any = None                 # regression.BasisSpec; default degree-3 polynomial
    quadrature: QuadratureEngine = QuadratureEngine()
    workers: int = 1
    truncation: float = 10.0
    solver: str = "normal"            # normal | lstsq
    driver_inputs: str = "fitted"     # fitted | raw
    centering: str = "none"           # none | mean | linear
    allow_override: bool = False
    probe_paths: int = 16

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.engine not in ("oracle", "regress1", "regress2"):
            raise ValueError(f"unknown engine {self.engine!r}")


@dataclass
class SchemeResult:
    y0: float
    n: int
    h: float
    engine: str
    seed: int
    conforming: bool
    wellposed: WellPosedness | None
    argmax_counts: np.ndarray
    config: SchemeConfig
    controls: Any = None
    step0_values: np.ndarray | None = None
    trunc_hits: int = 0
    report: Any = None                # regression.FitReport
    steps: list | None = field(default=None, repr=False)
    lift: MarkovLift | None = field(default=None, repr=False)
    notes: tuple = ()

    def bootstrap_stderr(self, resamples: int = 200, seed: int | None = None) -> float:
        """Bootstrap standard error of the mean of the step-0 values (0 for the oracle)."""
        if self.step0_values is None:
            return 0.0
        v = self.step0_values
        rng = np.random.default_rng(self.seed if seed is None else seed)
        means = np.empty(resamples)
        for b in range(resamples):
            means[b] = v[rng.integers(0, v.size, v.size)].mean()
        return float(means.std(ddof=1))


def probe_wellposedness(lift: MarkovLift, n: int, count: int = 16, seed: int = 0) -> WellPosedness:
    ens = simulate_reference(lift, n, count, seed)
    return well_posedness(lift.problem, ens.path_grids(horizon=lift.horizon))


def gate(wp: WellPosedness, h: float, allow_override: bool):
    """Enforce the well-posedness gate; returns ``(conforming, notes)``."""
    notes = []
    if not wp.ok:
        if not allow_override:
            raise AssumptionViolation(wp.violations)
        notes.append(f"assumption violated at {len(wp.violations)} probed tuples")
    if h > wp.h0 * (1 + 1e-12):
        if not allow_override:
            raise WellPosednessError(h, wp.h0)
        notes.append(f"h={h:.6g} exceeds h0={wp.h0:.6g}")
    return not notes, tuple(notes)


def backward_induction(lift: MarkovLift, config: SchemeConfig,
                       wellposed: WellPosedness | None = None) -> SchemeResult:
    """Run the scheme and return ``Y^h_0`` with diagnostics."""
    n = config.n
    h = lift.horizon / n
    if wellposed is None:
        wellposed = probe_wellposedness(lift, n, config.probe_paths, config.seed)
    conforming, notes = gate(wellposed, h, config.allow_override)
    if config.engine == "oracle":
        y0, steps = oracle_backward(lift, n, config.quadrature)
        counts = np.zeros((n, len(lift.controls)), dtype=int)
        for k, st in enumerate(steps):
            counts[k] = np.bincount(st.argmax, minlength=len(lift.controls))
        return SchemeResult(y0, n, h, "oracle", config.seed, conforming, wellposed,
                            counts, config, lift.controls, steps=steps, lift=lift, notes=notes)
    from .regression import BasisSpec, regression_backward

    basis = config.basis if config.basis is not None else BasisSpec()
    ens = simulate_reference(lift, n, config.paths, config.seed, config.workers)
    out = regression_backward(lift, ens, scheme=1 if config.engine == "regress1" else 2,
                              basis=basis, truncation=config.truncation,
                              solver=config.solver, driver_inputs=config.driver_inputs,
                              centering=config.centering)
    if not np.isfinite(out.y0):
        raise EvaluationError("Y0")
    return SchemeResult(out.y0, n, h, config.engine, config.seed, conforming, wellposed,
                        out.argmax_counts, config, lift.controls, out.step0_values,
                        out.report.trunc_hits_total, out.report, out.steps, lift, notes)


def solve(lift: MarkovLift, n: int, engine: str = "oracle", **kwargs) -> SchemeResult:
    """Shorthand for ``backward_induction(lift, SchemeConfig(n, engine, ...))``."""
    wp = kwargs.pop("wellposed", None)
    return backward_induction(lift, SchemeConfig(n=n, engine=engine, **kwargs), wp)


__all__ = [
    "DriverInput", "Lattice", "LatticeFunction", "QuadratureEngine", "ReferenceEnsemble",
    "SchemeConfig", "SchemeResult", "StepCoefficients", "backward_induction", "block_rng",
    "default_lattice", "driver_G", "driver_values", "gate", "gh_rule", "oracle_backward",
    "probe_wellposedness", "quadrature_engine", "simulate_reference", "solve",
    "step_coefficients",
]
