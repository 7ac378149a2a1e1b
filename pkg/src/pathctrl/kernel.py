"""One-step transition kernel of the controlled discrete-time semimartingale.

At a fixed ``(t, path, u)`` the increment density is a centered Gaussian
``N(0, h a0)`` multiplied by the quadratic factor

    1 - a_u.a0^{-1}/2 + b_u.a0^{-1} x + a_u.(a0^{-1} x x^T a0^{-T}) / (2h)

with ``a0 = sigma0 sigma0^T``, ``a_u = sigma sigma^T - a0`` and ``b_u = mu``.
Integrating against it equals a Gaussian expectation with the weights returned
by :func:`gaussian_weights`, which is what the scheme uses in practice.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erfinv, ndtr

from .errors import AssumptionViolation, DimensionUnsupported, WellPosednessError
from .model import ControlProblem, PathGrid

RANK_RTOL = 1e-10
PSD_TOL = 1e-12

_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class StepDensityParams:
    a0: np.ndarray
    a_u: np.ndarray
    b_u: np.ndarray
    h: float

    def __post_init__(self):
        a0 = np.atleast_2d(np.asarray(self.a0, dtype=float))
        d = a0.shape[0]
        a_u = np.asarray(self.a_u, dtype=float).reshape(d, d)
        b_u = np.asarray(self.b_u, dtype=float).reshape(d)
        if a0.shape != (d, d):
            raise ValueError("a0 must be square")
        if np.linalg.eigvalsh(0.5 * (a0 + a0.T)).min() <= 0:
            raise ValueError("a0 must be symmetric positive definite")
        if self.h <= 0:
            raise ValueError("h must be positive")
        object.__setattr__(self, "a0", a0)
        object.__setattr__(self, "a_u", a_u)
        object.__setattr__(self, "b_u", b_u)
        object.__setattr__(self, "h", float(self.h))

    @classmethod
    def from_coefficients(cls, sigma0, sigma, mu, h):
        sigma0 = np.atleast_2d(np.asarray(sigma0, dtype=float))
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        a0 = sigma0 @ sigma0.T
        return cls(a0, sigma @ sigma.T - a0, np.atleast_1d(mu), h)

    @property
    def dim(self) -> int:
        return self.a0.shape[0]

    @property
    def trace_ratio(self) -> float:
        """``a_u . a0^{-1}``."""
        return float(np.trace(self.a_u @ np.linalg.inv(self.a0)))

    def violations(self) -> list[str]:
        out = []
        ev = np.linalg.eigvalsh(0.5 * (self.a_u + self.a_u.T))
        if ev.min() < -PSD_TOL * max(1.0, np.abs(ev).max()):
            out.append(f"a_u not positive semidefinite (min eigenvalue {ev.min():.3g})")
        c = 1.0 - 0.5 * self.trace_ratio
        if c < -PSD_TOL:
            out.append(f"1 - a_u.a0^-1/2 = {c:.6g} < 0")
        return out


def step_mg(params: StepDensityParams) -> float:
    """Minimum over ``w`` of ``w^T a_u w / 2 + b_u.w``; ``-inf`` when unbounded."""
    a = 0.5 * (params.a_u + params.a_u.T)
    b = params.b_u
    ev, vec = np.linalg.eigh(a)
    top = np.abs(ev).max() if ev.size else 0.0
    if top > 0 and ev.min() < -RANK_RTOL * top:
        return -np.inf
    keep = ev > RANK_RTOL * top if top > 0 else np.zeros_like(ev, dtype=bool)
    coords = vec.T @ b
    if np.any(np.abs(coords[~keep]) > RANK_RTOL * max(1.0, np.linalg.norm(b))):
        return -np.inf
    return float(-0.5 * np.sum(coords[keep] ** 2 / ev[keep]))


@dataclass(frozen=True)
class WellPosedness:
    """Probe-based estimate of the constants ``m_G`` and ``h0``.

    ``m_G`` and ``h0`` are infima over all times, paths and controls; here they
    are minima over the probed tuples only (``heuristic`` is set when the
    coefficients were seen to vary across probes, i.e. the minimum may miss the
    true infimum).
    """

    m_g: float
    h0: float
    horizon: float
    argmin_mg: tuple | None = None
    argmin_h0: tuple | None = None
    violations: tuple = ()
    heuristic: bool = False
    min_ratio: float = 1.0
    user_mg: bool = False
    notes: tuple = field(default=())

    @property
    def ok(self) -> bool:
        return not self.violations

    def check(self, h: float | None = None):
        if self.violations:
            raise AssumptionViolation(self.violations)
        if h is not None and h > self.h0 * (1 + 1e-12):
            raise WellPosednessError(h, self.h0)
        return self

    def admits(self, h: float) -> bool:
        return self.ok and h <= self.h0 * (1 + 1e-12)

    def with_user_mg(self, m_g: float) -> "WellPosedness":
        """Replace the probed ``m_G`` by an analytic value and recompute ``h0``."""
        if m_g > 0:
            raise ValueError("m_G must be <= 0")
        h0 = _h0_from(m_g, self.min_ratio, self.horizon)
        viol = tuple(v for v in self.violations if "m_G" not in v[3])
        return WellPosedness(m_g, h0, self.horizon, None, self.argmin_h0, viol,
                             False, self.min_ratio, True, self.notes)


def _h0_from(m_g, min_ratio, horizon):
    if m_g == 0.0:
        return horizon
    if not np.isfinite(m_g):
        return 0.0
    return min(horizon, min_ratio / (-m_g))


def well_posedness(problem: ControlProblem, probe_paths: Sequence[PathGrid],
                   strict: bool = False) -> WellPosedness:
    """Estimate ``m_G`` and ``h0`` over probe paths, grid times and controls.

    With ``strict=True`` any violation raises :class:`AssumptionViolation`.
    """
    if not probe_paths:
        raise ValueError("need at least one probe path")
    m_g, arg_mg = 0.0, None
    ratios = []
    violations = []
    seen = {}
    cache = {}   # analysis of each distinct coefficient triple
    for pi, path in enumerate(probe_paths):
        for k in range(path.filled_to):
            frozen = path.frozen_at(k)
            t = k * path.h
            for ui, u in enumerate(problem.control_set):
                mu, sig, sig0, _ = problem.coefficients(t, frozen, u)
                sig_vals = (np.asarray(sig0, dtype=float).tobytes(),
                            np.asarray(sig, dtype=float).tobytes(),
                            np.asarray(mu, dtype=float).tobytes(), path.h)
                if sig_vals not in cache:
                    a0 = sig0 @ sig0.T
                    if np.linalg.eigvalsh(0.5 * (a0 + a0.T)).min() < problem.eps0:
                        cache[sig_vals] = None
                    else:
                        params = StepDensityParams.from_coefficients(sig0, sig, mu, path.h)
                        cache[sig_vals] = (step_mg(params), params.violations(),
                                           1.0 - 0.5 * params.trace_ratio)
                if cache[sig_vals] is None:
                    violations.append((pi, k, ui, "reference volatility below eps0"))
                    continue
                seen.setdefault(ui, set()).add(sig_vals[:3])
                mg, msgs, ratio = cache[sig_vals]
                if mg < m_g:
                    m_g, arg_mg = mg, (pi, k, ui)
                if not np.isfinite(mg):
                    violations.append((pi, k, ui, "m_G = -inf: b_u outside the range of a_u"))
                for msg in msgs:
                    violations.append((pi, k, ui, msg))
                if not ratios or ratio < ratios[0][0]:
                    ratios = [(ratio, (pi, k, ui))]
    horizon = problem.horizon
    min_ratio, arg_h0 = ratios[0] if ratios else (1.0, None)
    h0 = _h0_from(m_g, min_ratio, horizon)
    if np.isfinite(m_g) and h0 <= 0:
        violations.append((*arg_h0, "h0 <= 0"))
    heuristic = any(len(v) > 1 for v in seen.values())
    wp = WellPosedness(m_g, h0, horizon, arg_mg, arg_h0, tuple(violations),
                       heuristic, min_ratio)
    if strict:
        wp.check()
    return wp


def density_eval(params: StepDensityParams, x) -> np.ndarray:
    """Evaluate the step density at ``x`` (shape ``(..., d)``; scalars allowed in 1-d)."""
    d = params.dim
    x = np.asarray(x, dtype=float)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    a0inv = np.linalg.inv(params.a0)
    h = params.h
    quad0 = np.einsum("...i,ij,...j->...", x, a0inv, x)
    gauss = np.exp(-0.5 * quad0 / h) / np.sqrt((2 * np.pi * h) ** d * np.linalg.det(params.a0))
    m = a0inv @ params.a_u @ a0inv
    poly = (1.0 - 0.5 * params.trace_ratio + x @ (a0inv @ params.b_u)
            + 0.5 / h * np.einsum("...i,ij,...j->...", x, m, x))
    return gauss * poly


def density_moments(params: StepDensityParams):
    h = params.h
    mean = params.b_u * h
    cov = (params.a_u + params.a0) * h - np.outer(params.b_u, params.b_u) * h * h
    return mean, cov


def _std_pdf(xi, beta, r):
    phi = np.exp(-0.5 * xi * xi) / _SQRT_2PI
    return phi * (1.0 - 0.5 * r + beta * xi + 0.5 * r * xi * xi)


def _std_cdf(xi, beta, r):
    phi = np.exp(-0.5 * xi * xi) / _SQRT_2PI
    return ndtr(xi) - phi * (beta + 0.5 * r * xi)


def _std_coeffs(a0, a_u, b_u, h):
    """Standardized 1-d parameters: increment = sqrt(h a0) * xi."""
    scale = np.sqrt(h * a0)
    return scale, b_u * scale / a0, a_u / a0


def density_is_valid(beta, r, tol=1e-12):
    """Whether ``1 - r/2 + beta xi + r xi^2/2`` is nonnegative for every ``xi``."""
    beta = np.asarray(beta, dtype=float)
    r = np.asarray(r, dtype=float)
    return (r >= -tol) & (1.0 - 0.5 * r >= -tol) & (beta ** 2 <= 2.0 * r * (1.0 - 0.5 * r) + tol)


def _invert(u, beta, r, lo, hi, x, iters=60, tol=1e-13):
    """Safeguarded Newton on the standardized CDF inside brackets ``[lo, hi]``."""
    u, beta, r = np.broadcast_arrays(u, beta, r)
    lo = np.array(lo, dtype=float, copy=True)
    hi = np.array(hi, dtype=float, copy=True)
    x = np.clip(np.array(x, dtype=float, copy=True), lo, hi)
    for _ in range(iters):
        g = _std_cdf(x, beta, r) - u
        below = g < 0
        lo = np.where(below, x, lo)
        hi = np.where(below, hi, x)
        dens = _std_pdf(x, beta, r)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(dens > 0, g / dens, np.nan)
        cand = x - step
        bad = ~np.isfinite(cand) | (cand < lo) | (cand > hi)
        new = np.where(bad, 0.5 * (lo + hi), cand)
        done = np.abs(new - x) < tol * (1.0 + np.abs(x))
        x = new
        if np.all(done):
            break
    return x


class StepSampler:
    """Inverse-CDF sampler for the 1-d step density (the map ``H_h``).

    The CDF has a closed form in the standardized variable; it is tabulated on
    ``grid_points`` nodes spanning ``width`` standard deviations, inverted by
    linear interpolation and then polished by Newton steps confined to the
    table cell (bisection when Newton leaves it).
    """

    def __init__(self, params: StepDensityParams, grid_points: int = 4096, width: float = 8.0):
        if params.dim != 1:
            raise DimensionUnsupported("direct sampling of the step density needs d = 1")
        self.params = params
        a0 = float(params.a0[0, 0])
        self.scale, self.beta, self.r = _std_coeffs(a0, float(params.a_u[0, 0]),
                                                    float(params.b_u[0]), params.h)
        if not density_is_valid(self.beta, self.r):
            raise ValueError("step density is negative somewhere (h > h0?); no valid inverse CDF")
        sd = np.sqrt(1.0 + self.r)
        self.grid = np.linspace(self.beta - width * sd, self.beta + width * sd, grid_points)
        self.table = _std_cdf(self.grid, self.beta, self.r)

    def cdf(self, x) -> np.ndarray:
        """Tabulated CDF of the increment at ``x``."""
        return np.interp(np.asarray(x, dtype=float) / self.scale, self.grid, self.table)

    def __call__(self, u01) -> np.ndarray:
        u = np.clip(np.asarray(u01, dtype=float), self.table[0], self.table[-1])
        guess = np.interp(u, self.table, self.grid)
        idx = np.clip(np.searchsorted(self.table, u), 1, self.grid.size - 1)
        xi = _invert(u, self.beta, self.r, self.grid[idx - 1], self.grid[idx], guess, iters=8)
        return self.scale * xi


def sample_step(params: StepDensityParams, u01) -> np.ndarray:
    return StepSampler(params)(u01)


def sample_increments(a0, a_u, b_u, h, u01) -> np.ndarray:
    """Vectorized 1-d inverse-CDF sampling with per-element parameters."""
    a0 = np.asarray(a0, dtype=float)
    scale, beta, r = _std_coeffs(a0, np.asarray(a_u, dtype=float), np.asarray(b_u, dtype=float), h)
    if not np.all(density_is_valid(beta, r)):
        raise ValueError("step density is not a probability density for some element")
    sd = np.sqrt(1.0 + r)
    u = np.clip(np.asarray(u01, dtype=float), 1e-15, 1 - 1e-15)
    lo = beta - 12 * sd
    hi = beta + 12 * sd
    guess = beta + sd * np.sqrt(2.0) * erfinv(2 * u - 1)
    return scale * _invert(u, beta, r, lo, hi, guess)


def gaussian_weights(sigma0, dW, h: float):
    """Weights multiplying ``Y_{k+1}`` in the conditional expectations for Z and Gamma.

    Returns ``(w_y, w_z, w_gamma)`` with ``w_z = sigma0^{-T} dW / h`` and
    ``w_gamma = sigma0^{-T} (dW dW^T - h I) sigma0^{-1} / h^2``.  Leading batch
    axes are supported: ``sigma0`` of shape ``(..., d, d)``, ``dW`` of ``(..., d)``.
    """
    sigma0 = np.asarray(sigma0, dtype=float)
    dW = np.asarray(dW, dtype=float)
    if sigma0.ndim == 0:
        sigma0 = sigma0.reshape(1, 1)
    if dW.ndim == 0:
        dW = dW.reshape(1)
    d = sigma0.shape[-1]
    cond = np.linalg.cond(sigma0)
    if np.any(~np.isfinite(cond)) or np.any(cond > 1e14):
        raise np.linalg.LinAlgError("reference volatility is singular")
    inv = np.linalg.inv(sigma0)
    inv_t = np.swapaxes(inv, -1, -2)
    w_z = np.einsum("...ij,...j->...i", inv_t, dW) / h
    outer = dW[..., :, None] * dW[..., None, :] - h * np.eye(d)
    w_gamma = inv_t @ outer @ inv / (h * h)
    w_y = np.ones(dW.shape[:-1])
    return w_y, w_z, w_gamma
