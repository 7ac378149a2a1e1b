"""Problem definition: control grids, discrete paths and Markovian lifts.

A :class:`ControlProblem` holds path-functional coefficients, i.e. callables of
``(t, path, u)`` where ``path`` is a :class:`PathGrid` frozen after time ``t``.
The numerical scheme never works on raw paths; it consumes a
:class:`MarkovLift`, whose coefficient views are vectorized functions of the
lifted state ``(x, s)``.  :func:`lift_problem` builds one and checks it against
the path functionals by replaying random paths.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import LiftMismatch


def _same_point(a, b) -> bool:
    try:
        return bool(np.array_equal(np.asarray(a), np.asarray(b)))
    except (TypeError, ValueError):
        return a == b


@dataclass(frozen=True)
class ControlGrid:
    """Finite set of control points standing in for the compact control set.

    The supremum over controls in the driver becomes a max over ``points``;
    refining the grid is the user's resolution knob.
    """

    points: tuple

    def __init__(self, points: Sequence[Any]):
        pts = tuple(points)
        if not pts:
            raise ValueError("control grid must be nonempty")
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                if _same_point(pts[i], pts[j]):
                    raise ValueError(f"duplicate control points at {i} and {j}")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def __getitem__(self, i):
        return self.points[i]

    @classmethod
    def linspace(cls, lo: float, hi: float, num: int) -> "ControlGrid":
        return cls([float(v) for v in np.linspace(lo, hi, num)])


class PathGrid:
    """Path sampled on the uniform grid ``t_k = k h`` with linear interpolation.

    Nodes ``0..filled_to`` are valid.  Beyond ``t_{filled_to}`` the path is
    frozen at its last valid node, which realizes the stopped path ``x^t``.
    """

    def __init__(self, n: int, horizon: float, x0):
        if n < 1:
            raise ValueError("step count n must be >= 1")
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        self.n = int(n)
        self.horizon = float(horizon)
        self.h = self.horizon / self.n
        self.nodes = np.zeros((self.n + 1, x0.size))
        self.nodes[0] = x0
        self.filled_to = 0

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.h

    def append(self, x) -> "PathGrid":
        if self.filled_to >= self.n:
            raise IndexError("path already filled to the horizon")
        self.filled_to += 1
        self.nodes[self.filled_to] = np.asarray(x, dtype=float)
        return self

    def eval(self, t: float) -> np.ndarray:
        k_last = self.filled_to
        if t >= k_last * self.h:
            return self.nodes[k_last].copy()
        if t <= 0.0:
            return self.nodes[0].copy()
        k = min(int(np.floor(t / self.h)), k_last - 1)
        lam = t / self.h - k
        return (1.0 - lam) * self.nodes[k] + lam * self.nodes[k + 1]

    def frozen_at(self, k: int) -> "PathGrid":
        """Copy of the path with only nodes ``0..k`` valid."""
        if k > self.filled_to:
            raise IndexError(f"node {k} not filled (filled_to={self.filled_to})")
        out = PathGrid.__new__(PathGrid)
        out.n, out.horizon, out.h = self.n, self.horizon, self.h
        out.nodes = self.nodes.copy()
        out.nodes[k + 1:] = 0.0
        out.filled_to = k
        return out

    @classmethod
    def from_nodes(cls, nodes, horizon: float) -> "PathGrid":
        nodes = np.asarray(nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        p = cls(nodes.shape[0] - 1, horizon, nodes[0])
        p.nodes[:] = nodes
        p.filled_to = p.n
        return p

    def __repr__(self):
        return f"PathGrid(n={self.n}, h={self.h:.4g}, dim={self.dim}, filled_to={self.filled_to})"


def make_path(n: int, x0, horizon: float = 1.0) -> PathGrid:
    return PathGrid(n, horizon, x0)


@dataclass(frozen=True)
class ControlProblem:
    """Path-dependent control problem with path-functional coefficients.

    ``drift``, ``vol`` and ``running_reward`` take ``(t, path, u)``;
    ``terminal_reward`` takes the full path; ``ref_vol`` takes ``(t, path)``.
    """

    dim_x: int
    horizon: float
    x0: np.ndarray
    drift: Callable
    vol: Callable
    running_reward: Callable
    terminal_reward: Callable
    control_set: ControlGrid
    ref_vol: Callable
    eps0: float = 1e-8
    name: str = "problem"

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.size != self.dim_x:
            raise ValueError(f"x0 has length {x0.size}, expected {self.dim_x}")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        object.__setattr__(self, "x0", x0)

    def coefficients(self, t: float, path: PathGrid, u):
        """Return ``(mu, sigma, sigma0, L)`` as arrays at one tuple."""
        d = self.dim_x
        mu = np.asarray(self.drift(t, path, u), dtype=float).reshape(d)
        sig = np.asarray(self.vol(t, path, u), dtype=float).reshape(d, d)
        sig0 = np.asarray(self.ref_vol(t, path), dtype=float).reshape(d, d)
        ell = float(self.running_reward(t, path, u))
        return mu, sig, sig0, ell

    def check_invariants(self, paths: Sequence[PathGrid]) -> list[str]:
        """Spot-check boundedness and the reference-vol floor on ``paths``."""
        problems = []
        for pi, path in enumerate(paths):
            for k in range(path.filled_to + 1):
                frozen = path.frozen_at(k)
                t = k * path.h
                for ui, u in enumerate(self.control_set):
                    mu, sig, sig0, ell = self.coefficients(t, frozen, u)
                    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sig))):
                        problems.append(f"path {pi} k {k} control {ui}: non-finite drift/vol")
                a0 = sig0 @ sig0.T
                if np.linalg.eigvalsh(a0).min() < self.eps0:
                    problems.append(f"path {pi} k {k}: ref_vol below eps0")
        return problems


@dataclass(frozen=True)
class LiftSpec:
    """User description of a Markovian lift.

    All views are vectorized over a leading ensemble axis: ``x`` has shape
    ``(M, d)``, ``s`` has shape ``(M, dim_s)``.  ``drift`` returns ``(M, d)``,
    ``vol`` and ``ref_vol`` return ``(M, d, d)``, ``running_reward`` and
    ``terminal_reward`` return ``(M,)``.  ``update(s, x_next, h)`` returns the
    next companion state.
    """

    dim_s: int
    s0: Any
    update: Callable
    drift: Callable
    vol: Callable
    running_reward: Callable
    terminal_reward: Callable
    ref_vol: Callable


def _no_update(s, x_next, h):
    return s


def markov_spec(drift, vol, running_reward, terminal_reward, ref_vol) -> LiftSpec:
    """Lift with no companion state, for coefficients depending on ``x_t`` only."""
    return LiftSpec(0, np.zeros(0), _no_update, drift, vol, running_reward,
                    lambda x, s: terminal_reward(x), lambda t, x, s: ref_vol(t, x))


@dataclass(frozen=True)
class MarkovLift:
    """Problem plus its lifted, vectorized coefficient views."""

    problem: ControlProblem
    dim_s: int
    s0: np.ndarray
    update: Callable
    drift: Callable
    vol: Callable
    running_reward: Callable
    terminal_reward: Callable
    ref_vol: Callable
    lattice: Callable | None = field(default=None, compare=False)

    @property
    def dim_x(self) -> int:
        return self.problem.dim_x

    @property
    def controls(self) -> ControlGrid:
        return self.problem.control_set

    @property
    def horizon(self) -> float:
        return self.problem.horizon

    def initial_state(self, m: int):
        x = np.broadcast_to(self.problem.x0, (m, self.dim_x)).copy()
        s = np.broadcast_to(self.s0, (m, self.dim_s)).copy()
        return x, s

    def replay(self, path: PathGrid) -> np.ndarray:
        """Companion states ``s_0..s_n`` along a filled path."""
        s = np.zeros((path.filled_to + 1, self.dim_s))
        s[0] = self.s0
        for k in range(path.filled_to):
            s[k + 1] = np.asarray(
                self.update(s[k][None, :], path.nodes[k + 1][None, :], path.h)
            ).reshape(self.dim_s)
        return s


def _close(a, b, tol):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    err = np.max(np.abs(a - b)) if a.size else 0.0
    scale = max(1.0, float(np.max(np.abs(b))) if b.size else 1.0)
    return err <= tol * scale, err


def lift_problem(problem: ControlProblem, spec: LiftSpec, *, n_paths: int = 100,
                 n_steps: int = 8, seed: int = 0, tol: float = 1e-12,
                 lattice: Callable | None = None) -> MarkovLift:
    """Build a :class:`MarkovLift` and validate it by replaying random paths.

    Each random path is a scaled Gaussian random walk from ``x0``.  At every
    node and control the lifted views must reproduce the path functionals to
    ``tol`` (relative to ``max(1, |value|)``); the first disagreement raises
    :class:`LiftMismatch` naming the step index.
    """
    s0 = np.atleast_1d(np.asarray(spec.s0, dtype=float)).reshape(spec.dim_s)
    lift = MarkovLift(problem, spec.dim_s, s0, spec.update, spec.drift, spec.vol,
                      spec.running_reward, spec.terminal_reward, spec.ref_vol, lattice)
    if n_paths <= 0:
        return lift
    rng = np.random.default_rng(seed)
    d = problem.dim_x
    h = problem.horizon / n_steps
    scale = np.maximum(np.abs(problem.x0), 1.0) * 0.2
    for pi in range(n_paths):
        incr = rng.standard_normal((n_steps, d)) * np.sqrt(h) * scale
        nodes = np.vstack([problem.x0, problem.x0 + np.cumsum(incr, axis=0)])
        path = PathGrid.from_nodes(nodes, problem.horizon)
        s = lift.replay(path)
        for k in range(n_steps + 1):
            t = k * h
            frozen = path.frozen_at(k)
            xk = path.nodes[k][None, :]
            sk = s[k][None, :]
            if k < n_steps:
                ok, err = _close(lift.ref_vol(t, xk, sk)[0], problem.ref_vol(t, frozen), tol)
                if not ok:
                    raise LiftMismatch("ref_vol", k, pi, None, err)
                for ui, u in enumerate(problem.control_set):
                    for what, lv, pv in (
                        ("drift", lift.drift(t, xk, sk, u)[0], problem.drift(t, frozen, u)),
                        ("vol", lift.vol(t, xk, sk, u)[0], problem.vol(t, frozen, u)),
                        ("running_reward", lift.running_reward(t, xk, sk, u)[0],
                         problem.running_reward(t, frozen, u)),
                    ):
                        ok, err = _close(lv, pv, tol)
                        if not ok:
                            raise LiftMismatch(what, k, pi, ui, err)
            else:
                ok, err = _close(lift.terminal_reward(xk, sk)[0], problem.terminal_reward(path), tol)
                if not ok:
                    raise LiftMismatch("terminal_reward", k, pi, None, err)
    return lift
