"""Simulation-regression estimates of the scheme's conditional expectations.

Two projection schemes are provided.  Scheme 1 regresses one-step targets
(``Y_{k+1}`` times the weights, then ``Y_{k+1} + h G``); scheme 2 regresses the
terminal value plus the accumulated driver terms.  Least squares goes through
the normal equations on a standardized basis, with a small ridge added when
the Gram matrix is ill conditioned.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import RegressionFailure
from .kernel import gaussian_weights
from .scheme import ReferenceEnsemble, StepCoefficients, driver_values, step_coefficients

COND_LIMIT = 1e12
RIDGE_SCALE = 1e-10


class RankWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BasisSpec:
    """Regression basis.

    ``family="poly"``: monomials of total degree ``<= degree`` in the
    standardized state coordinates (cross terms included).
    ``family="pwlin"``: constant, linear term and hinge functions at
    ``bins - 1`` interior quantiles, per coordinate.
    ``per_step`` optionally maps a time index to another spec.
    """

    family: str = "poly"
    degree: int = 3
    bins: int = 8
    per_step: dict | None = field(default=None, compare=False, hash=False)

    def __post_init__(self):
        if self.family not in ("poly", "pwlin"):
            raise ValueError(f"unknown basis family {self.family!r}")
        if self.degree < 0 or self.bins < 1:
            raise ValueError("degree must be >= 0 and bins >= 1")

    def at(self, k: int) -> "BasisSpec":
        if self.per_step and k in self.per_step:
            return self.per_step[k]
        return self

    def size(self, dim: int) -> int:
        if self.family == "poly":
            return len(_exponents(dim, self.degree))
        return 1 + dim * self.bins

    def label(self) -> str:
        return f"poly:{self.degree}" if self.family == "poly" else f"pwlin:{self.bins}"

    @classmethod
    def parse(cls, text: str) -> "BasisSpec":
        fam, _, arg = text.partition(":")
        fam = fam.strip()
        if fam == "poly":
            return cls("poly", degree=int(arg or 3))
        if fam == "pwlin":
            return cls("pwlin", bins=int(arg or 8))
        raise ValueError(f"cannot parse basis {text!r}")


CONSTANT = BasisSpec("poly", degree=0)


def _exponents(dim: int, degree: int):
    out = []
    for total in range(degree + 1):
        for combo in itertools.product(range(total + 1), repeat=dim):
            if sum(combo) == total:
                out.append(combo)
    return np.array(out, dtype=int).reshape(len(out), dim)


@dataclass
class Fit:
    """Fitted linear combination of basis functions."""

    spec: BasisSpec
    center: np.ndarray
    scale: np.ndarray
    knots: list | None
    coef: np.ndarray
    cond: float
    residual: float
    ridge: bool

    def design(self, states) -> np.ndarray:
        return _design(np.asarray(states, dtype=float), self.spec, self.center,
                       self.scale, self.knots)

    def predict(self, states) -> np.ndarray:
        return self.design(states) @ self.coef


def _design(states, spec, center, scale, knots):
    z = (states - center) / scale
    m, dim = z.shape
    if spec.family == "poly":
        ex = _exponents(dim, spec.degree)
        cols = np.ones((m, ex.shape[0]))
        for j, e in enumerate(ex):
            for c in range(dim):
                if e[c]:
                    cols[:, j] *= z[:, c] ** e[c]
        return cols
    parts = [np.ones((m, 1))]
    for c in range(dim):
        parts.append(z[:, c:c + 1])
        q = knots[c]
        parts.append(np.maximum(z[:, c:c + 1] - q[None, :], 0.0))
    return np.hstack(parts)


def fit_step(states, targets, basis: BasisSpec = BasisSpec(), solver: str = "normal",
             t_index: int | None = None) -> Fit:
    """Least-squares coefficients of ``targets`` on the basis evaluated at ``states``.

    Normal equations are solved directly unless the Gram matrix condition
    number exceeds ``1e12``, in which case a ridge of ``1e-10 * trace / I`` is
    added.  ``solver="lstsq"`` uses an orthogonal factorization instead.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    y = np.asarray(targets, dtype=float)
    m, dim = states.shape
    if not np.all(np.isfinite(y)):
        raise RegressionFailure("non-finite regression targets", t_index)
    center = states.mean(axis=0)
    scale = states.std(axis=0)
    flat = scale == 0
    scale = np.where(flat, 1.0, scale)
    knots = None
    if basis.family == "pwlin":
        z = (states - center) / scale
        qs = np.linspace(0, 1, basis.bins + 1)[1:-1]
        knots = [np.quantile(z[:, c], qs) if qs.size else np.zeros(0) for c in range(dim)]
    A = _design(states, basis, center, scale, knots)
    nb = A.shape[1]
    if m < nb:
        raise RegressionFailure(f"{m} samples for {nb} basis functions", t_index)
    gram = A.T @ A / m
    rhs = A.T @ y / m
    with np.errstate(all="ignore"):
        cond = float(np.linalg.cond(gram))
    ridge = False
    if solver == "lstsq":
        coef = np.linalg.lstsq(A, y, rcond=None)[0]
    elif solver == "normal":
        if not np.isfinite(cond) or cond > COND_LIMIT:
            if nb > 1 and np.any(flat):
                warnings.warn(f"constant state coordinate with {nb} basis functions"
                              f"{'' if t_index is None else f' at step {t_index}'}; "
                              "using ridge", RankWarning, stacklevel=2)
            lam = RIDGE_SCALE * np.trace(gram) / nb
            if lam <= 0:
                lam = RIDGE_SCALE
            gram = gram + lam * np.eye(nb)
            ridge = True
        try:
            coef = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError as exc:
            raise RegressionFailure(f"normal equations failed: {exc}", t_index) from exc
    else:
        raise ValueError(f"unknown solver {solver!r}")
    resid = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    return Fit(basis, center, scale, knots, coef, cond, resid, ridge)


def truncate_targets(targets, bound: float):
    """Clip ``targets`` into ``[-bound, bound]``; returns ``(clipped, hits)``."""
    t = np.asarray(targets, dtype=float)
    hits = int(np.count_nonzero(np.abs(t) > bound))
    if hits == 0:
        return t, 0
    return np.clip(t, -bound, bound), hits


@dataclass
class StepFit:
    k: int
    y_fit: "Fit"
    z_fits: list
    gamma_fits: dict
    y_values: np.ndarray
    g_values: np.ndarray
    argmax: np.ndarray
    y_targets: np.ndarray
    trunc_hits: int

    def z_at(self, states) -> np.ndarray:
        return np.stack([f.predict(states) for f in self.z_fits], axis=1)

    def gamma_at(self, states) -> np.ndarray:
        d = len(self.z_fits)
        m = np.asarray(states).shape[0]
        g = np.empty((m, d, d))
        for (i, j), f in self.gamma_fits.items():
            v = f.predict(states)
            g[:, i, j] = v
            g[:, j, i] = v
        return g


@dataclass
class Bounds:
    y: float
    z: float
    gamma: float


def _is_constant(states) -> bool:
    return bool(np.all(np.ptp(states, axis=0) == 0))


CENTERINGS = ("none", "mean", "linear")


def _fit_weighted(ens: ReferenceEnsemble, k: int, base: np.ndarray, spec: BasisSpec,
                  bounds: Bounds, solver: str, centering: str = "none"):
    """Fit Z and Gamma from ``base`` times the Gaussian weights at step ``k``.

    Since ``E_k[w_z] = 0`` and ``E_k[w_gamma] = 0``, any function of the step-``k``
    state may be subtracted from ``base`` without changing the conditional
    expectations.  ``centering="mean"`` subtracts the fitted ``E_k[base]``;
    ``"linear"`` additionally subtracts ``Z_k . (X_{k+1} - X_k)`` from the
    Gamma targets (``E_k[dX w_gamma] = 0`` by symmetry).
    """
    if centering not in CENTERINGS:
        raise ValueError(f"unknown centering {centering!r}")
    states = ens.states(k)
    _, wz, wg = gaussian_weights(ens.sigma0[:, k], ens.dW[:, k], ens.h)
    d = wz.shape[1]
    hits = 0
    base_z = base
    if centering != "none":
        base_z = base - fit_step(states, base, spec, solver, k).predict(states)
    z_fits, raw_z = [], np.empty_like(wz)
    for i in range(d):
        tz, nh = truncate_targets(base_z * wz[:, i], bounds.z)
        hits += nh
        raw_z[:, i] = tz
        z_fits.append(fit_step(states, tz, spec, solver, k))
    base_g = base_z
    if centering == "linear":
        dx = np.einsum("mij,mj->mi", ens.sigma0[:, k], ens.dW[:, k])
        z_hat = np.stack([f.predict(states) for f in z_fits], axis=1)
        base_g = base_z - np.sum(z_hat * dx, axis=1)
    g_fits, raw_g = {}, np.empty_like(wg)
    for i in range(d):
        for j in range(i, d):
            tg, nh = truncate_targets(base_g * wg[:, i, j], bounds.gamma)
            hits += nh
            raw_g[:, i, j] = tg
            raw_g[:, j, i] = tg
            g_fits[(i, j)] = fit_step(states, tg, spec, solver, k)
    return z_fits, g_fits, raw_z, raw_g, hits


def _driver_step(ens, k, base, basis, coefs, bounds, solver, driver_inputs, centering):
    states = ens.states(k)
    spec = basis if not _is_constant(states) else CONSTANT
    z_fits, g_fits, raw_z, raw_g, hits = _fit_weighted(ens, k, base, spec, bounds, solver,
                                                       centering)
    partial = StepFit(k, None, z_fits, g_fits, None, None, None, None, hits)
    if driver_inputs == "fitted":
        z_hat, g_hat = partial.z_at(states), partial.gamma_at(states)
    elif driver_inputs == "raw":
        z_hat, g_hat = raw_z, raw_g
    else:
        raise ValueError(f"unknown driver_inputs {driver_inputs!r}")
    g_val, arg = driver_values(coefs, g_hat, z_hat, k)
    partial.g_values = g_val
    partial.argmax = arg
    return partial, spec, states


def scheme1_step(ens: ReferenceEnsemble, k: int, y_next: np.ndarray, basis: BasisSpec,
                 coefs: StepCoefficients, bounds: Bounds, solver: str = "normal",
                 driver_inputs: str = "fitted", centering: str = "none") -> StepFit:
    """One step of scheme 1.

    ``Z_k`` and ``Gamma_k`` are fits of ``Y_{k+1}`` times the weights; ``Y_k`` is
    the fit of ``Y_{k+1} + h G(t_k, x, s, Gamma_k, Z_k)`` with ``Z_k, Gamma_k``
    evaluated through their fitted basis expansions at each path's own state.
    """
    step, spec, states = _driver_step(ens, k, y_next, basis.at(k), coefs, bounds,
                                      solver, driver_inputs, centering)
    ty, nh = truncate_targets(y_next + ens.h * step.g_values, bounds.y)
    step.y_fit = fit_step(states, ty, spec, solver, k)
    step.y_values = step.y_fit.predict(states)
    step.y_targets = ty
    step.trunc_hits += nh
    return step


def scheme2_step(ens: ReferenceEnsemble, k: int, cumulative: np.ndarray, basis: BasisSpec,
                 coefs: StepCoefficients, bounds: Bounds, solver: str = "normal",
                 driver_inputs: str = "fitted", centering: str = "none") -> StepFit:
    """One step of scheme 2.

    ``cumulative`` is ``Y_T + sum_{i=k+1}^{n-1} h G_i`` per path, with each
    ``G_i`` evaluated at that path's state at time ``t_i``.  ``Z_k`` and
    ``Gamma_k`` regress ``cumulative`` times the weights; ``Y_k`` regresses
    ``cumulative + h G_k``.  The caller accumulates ``step.g_values``.
    """
    step, spec, states = _driver_step(ens, k, cumulative, basis.at(k), coefs, bounds,
                                      solver, driver_inputs, centering)
    ty, nh = truncate_targets(cumulative + ens.h * step.g_values, bounds.y)
    step.y_fit = fit_step(states, ty, spec, solver, k)
    step.y_values = step.y_fit.predict(states)
    step.y_targets = ty
    step.trunc_hits += nh
    return step


@dataclass
class FitReport:
    """Per-step regression diagnostics (index ``k`` runs ``0..n-1``)."""

    coef_y: list
    coef_z: list
    coef_gamma: list
    residual_y: list
    cond_y: list
    cond_max: list
    ridge_steps: list
    trunc_hits: list
    bound_y: float

    @property
    def trunc_hits_total(self) -> int:
        return int(sum(self.trunc_hits))

    def to_dict(self) -> dict:
        return {
            "coef_y": [np.asarray(c).tolist() for c in self.coef_y],
            "coef_z": [[np.asarray(c).tolist() for c in cs] for cs in self.coef_z],
            "coef_gamma": [[np.asarray(c).tolist() for c in cs] for cs in self.coef_gamma],
            "residual_y": list(map(float, self.residual_y)),
            "cond_y": list(map(float, self.cond_y)),
            "cond_max": list(map(float, self.cond_max)),
            "ridge_steps": list(self.ridge_steps),
            "trunc_hits": list(map(int, self.trunc_hits)),
            "bound_y": float(self.bound_y),
        }


@dataclass
class RegressionOutput:
    """``step0_values`` are the pathwise sums ``Y_T + sum_k h G_k``; their mean
    equals ``y0`` when the driver vanishes, and they carry the estimator's
    sampling noise (the step-0 fitted values of scheme 1 are smoothed)."""

    y0: float
    step0_values: np.ndarray
    steps: list
    argmax_counts: np.ndarray
    report: FitReport


def a_priori_bounds(terminal: np.ndarray, ens: ReferenceEnsemble, k: int, factor: float) -> Bounds:
    """Truncation levels from the terminal values and the step-``k`` weight sizes."""
    by = factor * max(float(np.max(np.abs(terminal))), 1e-300)
    _, wz, wg = gaussian_weights(ens.sigma0[:, k], ens.dW[:, k], ens.h)
    return Bounds(by, by * float(np.max(np.abs(wz))), by * float(np.max(np.abs(wg))))


def regression_backward(lift, ens: ReferenceEnsemble, scheme: int = 1,
                        basis: BasisSpec = BasisSpec(), truncation: float = 10.0,
                        solver: str = "normal", driver_inputs: str = "fitted",
                        centering: str = "none") -> RegressionOutput:
    n, h = ens.n, ens.h
    terminal = np.asarray(lift.terminal_reward(ens.x[:, n], ens.s[:, n]), dtype=float)
    if not np.all(np.isfinite(terminal)):
        raise RegressionFailure("non-finite terminal values", n)
    E = len(lift.controls)
    steps = [None] * n
    counts = np.zeros((n, E), dtype=int)
    current = terminal
    realized = terminal.copy()
    for k in range(n - 1, -1, -1):
        coefs = step_coefficients(lift, k * h, ens.x[:, k], ens.s[:, k], k)
        bounds = a_priori_bounds(terminal, ens, k, truncation)
        if scheme == 1:
            st = scheme1_step(ens, k, current, basis, coefs, bounds, solver, driver_inputs,
                              centering)
            current = st.y_values
        elif scheme == 2:
            st = scheme2_step(ens, k, current, basis, coefs, bounds, solver, driver_inputs,
                              centering)
            current = current + h * st.g_values
        else:
            raise ValueError("scheme must be 1 or 2")
        realized = realized + h * st.g_values
        steps[k] = st
        counts[k] = np.bincount(st.argmax, minlength=E)
    st0 = steps[0]
    report = FitReport(
        coef_y=[s.y_fit.coef for s in steps],
        coef_z=[[f.coef for f in s.z_fits] for s in steps],
        coef_gamma=[[f.coef for f in s.gamma_fits.values()] for s in steps],
        residual_y=[s.y_fit.residual for s in steps],
        cond_y=[s.y_fit.cond for s in steps],
        cond_max=[max([s.y_fit.cond] + [f.cond for f in s.z_fits]
                      + [f.cond for f in s.gamma_fits.values()]) for s in steps],
        ridge_steps=[s.k for s in steps if s.y_fit.ridge],
        trunc_hits=[s.trunc_hits for s in steps],
        bound_y=truncation * float(np.max(np.abs(terminal))),
    )
    y0 = float(np.mean(st0.y_values))
    return RegressionOutput(y0, realized, steps, counts, report)
