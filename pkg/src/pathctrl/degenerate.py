"""Perturbation of degenerate volatility: ``sigma^eps = (sigma sigma^T + eps^2 I)^{1/2}``.

The perturbed problem is nondegenerate by construction and its value differs
from the original by ``O(eps)``.  The constant is unknown, so the bias is only
ever reported through an epsilon sweep (:func:`epsilon_sweep`).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .errors import AssumptionViolation
from .kernel import WellPosedness, well_posedness
from .model import ControlProblem, MarkovLift, PathGrid

CLAMP_TOL = 1e-12


def sym_sqrt(a) -> np.ndarray:
    """Symmetric PSD square root of ``a`` (batched over leading axes).

    Eigenvalues below ``CLAMP_TOL`` (including slightly negative round-off)
    are clamped to zero.
    """
    a = np.asarray(a, dtype=float)
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    w, v = np.linalg.eigh(a)
    w = np.where(w < CLAMP_TOL, 0.0, w)
    return (v * np.sqrt(w)[..., None, :]) @ np.swapaxes(v, -1, -2)


def perturbed_vol(sigma, eps: float) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    d = sigma.shape[-1]
    return sym_sqrt(sigma @ np.swapaxes(sigma, -1, -2) + eps * eps * np.eye(d))


@dataclass(frozen=True)
class PerturbedProblem:
    base: ControlProblem
    epsilon: float
    problem: ControlProblem
    lift: MarkovLift | None
    wellposed: WellPosedness | None

    @property
    def conforming(self) -> bool:
        return self.wellposed is not None and self.wellposed.ok


def _path_state(lift: MarkovLift, t: float, path: PathGrid):
    """Lifted state ``(x, s)`` of a frozen path at grid time ``t``."""
    k = min(int(round(t / path.h)), path.filled_to)
    x = path.nodes[k][None, :]
    s = lift.replay(path.frozen_at(k))[k][None, :]
    return x, s


def perturb(target, epsilon: float, ref_vol: Callable | None = None, *,
            probe_paths: int = 16, probe_steps: int = 8, seed: int = 0,
            strict: bool = True) -> PerturbedProblem:
    """Perturb the volatility of a problem or lift by ``eps^2 I``.

    ``target`` is a :class:`MarkovLift` (preferred: the result can be solved)
    or a bare :class:`ControlProblem`.  The reference vol becomes ``eps I``
    unless ``ref_vol`` is given: for a lift it is a vectorized callable
    ``(t, x, s) -> (M, d, d)``, for a bare problem a callable ``(t, path)``.
    The well-posedness constants are re-estimated on probe paths of the
    perturbed reference process; with ``strict`` a violation raises
    :class:`AssumptionViolation` before anything is solved.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    eps = float(epsilon)
    lift = target if isinstance(target, MarkovLift) else None
    base = lift.problem if lift is not None else target
    d = base.dim_x

    if lift is not None:
        lift_ref = ref_vol if ref_vol is not None else (
            lambda t, x, s: np.broadcast_to(eps * np.eye(d), (x.shape[0], d, d)).copy())

        def path_ref(t, path):
            x, s = _path_state(lift, t, path)
            return np.asarray(lift_ref(t, x, s), dtype=float).reshape(d, d)
    else:
        path_ref = ref_vol if ref_vol is not None else (lambda t, path: eps * np.eye(d))

    def path_vol(t, path, u):
        return perturbed_vol(np.asarray(base.vol(t, path, u), dtype=float).reshape(d, d), eps)

    problem = replace(base, vol=path_vol, ref_vol=path_ref,
                      eps0=min(base.eps0, 0.5 * eps * eps), name=f"{base.name}@eps={eps:g}")
    new_lift = None
    if lift is not None:
        def lifted_vol(t, x, s, u):
            sig = np.asarray(lift.vol(t, x, s, u), dtype=float).reshape(x.shape[0], d, d)
            return perturbed_vol(sig, eps)

        new_lift = replace(lift, problem=problem, vol=lifted_vol, ref_vol=lift_ref)

    wp = None
    if probe_paths:
        if new_lift is not None:
            from .scheme import simulate_reference
            ens = simulate_reference(new_lift, probe_steps, probe_paths, seed)
            paths = ens.path_grids(horizon=problem.horizon)
        else:
            paths = _constant_paths(problem, probe_steps, probe_paths)
        wp = well_posedness(problem, paths)
        if strict and not wp.ok:
            raise AssumptionViolation(wp.violations)
    return PerturbedProblem(base, eps, problem, new_lift, wp)


def _constant_paths(problem: ControlProblem, n: int, count: int) -> list[PathGrid]:
    rng = np.random.default_rng(0)
    out = []
    for _ in range(count):
        incr = rng.standard_normal((n, problem.dim_x)) * np.sqrt(problem.horizon / n) * 0.2
        out.append(PathGrid.from_nodes(np.vstack([problem.x0, problem.x0 + np.cumsum(incr, 0)]),
                                       problem.horizon))
    return out


@dataclass(frozen=True)
class SweepRow:
    epsilon: float
    y0: float
    stderr: float
    m_g: float
    h0: float
    conforming: bool


@dataclass(frozen=True)
class LinearFit:
    intercept: float
    slope: float
    r2: float


def fit_linear(eps: Sequence[float], values: Sequence[float]) -> LinearFit:
    """Least-squares line ``value = a + C eps`` with its coefficient of determination."""
    e = np.asarray(eps, dtype=float)
    v = np.asarray(values, dtype=float)
    A = np.column_stack([np.ones_like(e), e])
    coef, *_ = np.linalg.lstsq(A, v, rcond=None)
    resid = v - A @ coef
    ss_tot = float(np.sum((v - v.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return LinearFit(float(coef[0]), float(coef[1]), r2)


def epsilon_sweep(lift: MarkovLift, epsilons: Sequence[float], n: int,
                  ref_vol_for: Callable[[float], Callable] | None = None,
                  **solve_kwargs) -> tuple[list[SweepRow], LinearFit]:
    """Solve the perturbed problem for each epsilon with common random numbers.

    Every solve uses the same seed, so the reference Brownian increments are
    shared across epsilon.  Returns the rows and the line fitted through
    ``(eps, y0)``; its slope estimates the bias constant.
    """
    from .scheme import solve

    rows = []
    for eps in epsilons:
        ref = ref_vol_for(eps) if ref_vol_for is not None else None
        pp = perturb(lift, eps, ref, strict=not solve_kwargs.get("allow_override", False))
        res = solve(pp.lift, n, wellposed=pp.wellposed, **solve_kwargs)
        rows.append(SweepRow(float(eps), res.y0, res.bootstrap_stderr(), pp.wellposed.m_g,
                             pp.wellposed.h0, res.conforming))
    return rows, fit_linear([r.epsilon for r in rows], [r.y0 for r in rows])
