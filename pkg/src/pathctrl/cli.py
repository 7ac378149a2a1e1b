"""Command-line front end: well-posedness checks, solves, epsilon sweeps and
convergence studies with CSV and JSON reports.

Config files are flat ``key = value`` text (``#`` starts a comment)::

    problem = bs-call
    n = 8, 16, 32
    paths = 100000
    engine = oracle
    basis = poly:3
    seed = 0
    perturb_eps = 0.05, 0.1
    out = report.csv
    allow_h_override = false
    param.ref_sigma = 0.2

Command-line flags override config values.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from importlib import metadata

import numpy as np

from . import problems as builtins_mod
from .degenerate import perturb
from .errors import (AssumptionViolation, EvaluationError, PathCtrlError, RegressionFailure,
                     WellPosednessError)
from .regression import BasisSpec
from .scheme import QuadratureEngine, SchemeConfig, backward_induction, gate, probe_wellposedness

CSV_COLUMNS = ["problem", "n", "h", "eps", "engine", "y0", "stderr", "m_g", "h_0",
               "seconds", "trunc_hits", "override"]

EXIT_OK, EXIT_CONFIG, EXIT_ASSUMPTION, EXIT_NUMERICAL = 0, 1, 2, 3


def library_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _parse_list(text, kind=float):
    if isinstance(text, (list, tuple)):
        return [kind(v) for v in text]
    items = [v for v in str(text).replace(";", ",").split(",") if v.strip()]
    return [kind(v) for v in items]


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_scalar(text):
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return str(text).strip()


@dataclass(frozen=True)
class RunConfig:
    problem: str
    n: tuple = (16,)
    paths: int = 100_000
    basis: str = "poly:3"
    engine: str = "oracle"
    seed: int = 0
    perturb_eps: tuple = ()
    out: str | None = None
    allow_h_override: bool = False
    workers: int = 1
    m_g: float | None = None
    quad_nodes: int = 64
    centering: str = "none"
    timing: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.n:
            raise ValueError("n list must be nonempty")
        if any(int(v) < 1 for v in self.n):
            raise ValueError("every n must be >= 1")
        if self.engine not in ("oracle", "regress1", "regress2"):
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.problem not in builtins_mod.BUILTINS:
            raise ValueError(f"unknown problem {self.problem!r}; choose from "
                             f"{', '.join(sorted(builtins_mod.BUILTINS))}")
        if any(e <= 0 for e in self.perturb_eps):
            raise ValueError("perturb_eps values must be positive")
        basis = BasisSpec.parse(self.basis)
        if self.engine != "oracle":
            dim = 2 if self.problem in ("call-sharpe", "asian-lift") else 1
            if self.paths < basis.size(dim):
                raise ValueError(f"paths={self.paths} is below the basis size {basis.size(dim)}")

    def echo(self) -> dict:
        """Config as recorded in reports; the worker count is left out so that
        reports do not depend on it."""
        d = asdict(self)
        del d["workers"]
        d["n"] = list(self.n)
        d["perturb_eps"] = list(self.perturb_eps)
        return d


_KEYS = {
    "problem": str, "n": lambda v: tuple(_parse_list(v, int)), "paths": int, "basis": str,
    "engine": str, "seed": int, "perturb_eps": lambda v: tuple(_parse_list(v, float)),
    "out": str, "allow_h_override": _parse_bool, "workers": int,
    "m_g": float, "quad_nodes": int, "centering": str, "timing": _parse_bool,
}


def parse_config_text(text: str) -> dict:
    values, params = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, val = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key.startswith("param."):
            params[key[6:]] = _parse_scalar(val)
        elif key in _KEYS:
            values[key] = _KEYS[key](val)
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    if params:
        values["params"] = params
    return values


def load_config(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


@dataclass
class RunRow:
    problem: str
    n: int
    h: float
    eps: float
    engine: str
    y0: float
    stderr: float
    m_g: float
    h_0: float
    seconds: float | None
    trunc_hits: int
    override: int
    argmax_histogram: list
    notes: list
    heuristic_mg: bool


@dataclass
class RunReport:
    rows: list
    config: dict
    version: str

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.problem, r.n, _fmt(r.h), _fmt(r.eps), r.engine, _fmt(r.y0),
                        _fmt(r.stderr), _fmt(r.m_g), _fmt(r.h_0),
                        "" if r.seconds is None else f"{r.seconds:.3f}", r.trunc_hits, r.override])
        return buf.getvalue()

    def json_text(self) -> str:
        doc = {"version": self.version, "config": self.config, "columns": CSV_COLUMNS,
               "rows": [_json_row(r) for r in self.rows]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _fmt(v) -> str:
    return repr(float(v))


def _json_float(v):
    v = float(v)
    if math.isfinite(v):
        return v
    return "inf" if v > 0 else ("-inf" if v < 0 else "nan")


def _json_row(r: RunRow) -> dict:
    d = asdict(r)
    for k in ("h", "eps", "y0", "stderr", "m_g", "h_0"):
        d[k] = _json_float(d[k])
    return d


def _build(config: RunConfig, eps: float):
    lift = builtins_mod.builtin(config.problem, **config.params)
    if eps > 0:
        factory = builtins_mod.PERTURB_REF.get(config.problem)
        ref = factory(eps) if factory is not None else None
        pp = perturb(lift, eps, ref, strict=False)
        return pp.lift
    return lift


def run(config: RunConfig) -> RunReport:
    """Solve every ``(n, eps)`` pair; raise on a gate failure before any output."""
    rows = []
    eps_list = list(config.perturb_eps) or [0.0]
    basis = BasisSpec.parse(config.basis)
    for eps in eps_list:
        lift = _build(config, eps)
        for n in config.n:
            n = int(n)
            h = lift.horizon / n
            wp = probe_wellposedness(lift, n, 16, config.seed)
            if config.m_g is not None:
                wp = wp.with_user_mg(config.m_g)
            gate(wp, h, config.allow_h_override)
            scfg = SchemeConfig(n=n, engine=config.engine, paths=config.paths, seed=config.seed,
                                basis=basis, quadrature=QuadratureEngine(nodes=config.quad_nodes),
                                workers=config.workers, allow_override=config.allow_h_override,
                                centering=config.centering)
            t0 = time.perf_counter()
            res = backward_induction(lift, scfg, wp)
            elapsed = time.perf_counter() - t0
            rows.append(RunRow(
                config.problem, n, h, eps, config.engine, res.y0, res.bootstrap_stderr(),
                wp.m_g, wp.h0, elapsed if config.timing else None, int(res.trunc_hits),
                0 if res.conforming else 1, res.argmax_counts.sum(axis=0).tolist(),
                list(res.notes), bool(wp.heuristic)))
    return RunReport(rows, config.echo(), library_version())


def _atomic_write(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def json_path(csv_path: str) -> str:
    root, ext = os.path.splitext(csv_path)
    return root + ".json" if ext.lower() == ".csv" else csv_path + ".json"


def write_report(report: RunReport, out: str):
    """Write the CSV and its JSON mirror (``.json`` next to it)."""
    _atomic_write(out, report.csv_text())
    _atomic_write(json_path(out), report.json_text())


def check_writable(out: str):
    directory = os.path.dirname(os.path.abspath(out)) or "."
    if not os.path.isdir(directory) or not os.access(directory, os.W_OK):
        raise OSError(f"cannot write to {out!r}")


# --------------------------------------------------------------------------
# convergence study


@dataclass
class ConvergenceTable:
    rows: list                 # dicts with n, h, y0, stderr, error
    reference: float
    reference_kind: str
    slope: float | None        # empirical log-log slope of error vs h
    flags: list
    bound_note: str = ("worst-case bound from theory: error = O(h^(1/8 - eps)); "
                       "the slope above is an empirical fit, not that rate")

    def text(self) -> str:
        out = [f"reference ({self.reference_kind}) = {self.reference!r}",
               f"{'n':>6} {'h':>12} {'y0':>14} {'stderr':>10} {'error':>12}"]
        for r in self.rows:
            out.append(f"{r['n']:>6} {r['h']:>12.6g} {r['y0']:>14.8g} {r['stderr']:>10.3g} "
                       f"{r['error']:>12.4g}")
        s = "n/a" if self.slope is None else f"{self.slope:.4f}"
        out.append(f"empirical slope of log|error| vs log h: {s}")
        out.extend(f"flag: {f}" for f in self.flags)
        out.append(self.bound_note)
        return "\n".join(out) + "\n"


def fitted_slope(h, err) -> float | None:
    h = np.asarray(h, dtype=float)
    e = np.abs(np.asarray(err, dtype=float))
    ok = e > 0
    if ok.sum() < 2:
        return None
    return float(np.polyfit(np.log(h[ok]), np.log(e[ok]), 1)[0])


def convergence_study(config: RunConfig, reference: float | None = None) -> ConvergenceTable:
    """Errors against a reference along the ``n`` ladder, with an empirical slope.

    The reference is, in order: the ``reference`` argument, a closed form for
    the builtin, or the oracle engine at four times the finest ``n``.
    """
    ns = sorted(int(v) for v in config.n)
    if len(ns) < 4:
        raise ValueError("a convergence study needs at least 4 ladder points")
    kind = "given"
    if reference is None:
        reference = builtins_mod.reference_value(config.problem, **config.params)
        kind = "closed form"
    if reference is None:
        ref_cfg = replace(config, n=(4 * ns[-1],), engine="oracle", perturb_eps=config.perturb_eps[:1])
        reference = run(ref_cfg).rows[0].y0
        kind = f"oracle at n={4 * ns[-1]}"
    report = run(replace(config, n=tuple(ns), perturb_eps=config.perturb_eps[:1]))
    rows = [{"n": r.n, "h": r.h, "y0": r.y0, "stderr": r.stderr, "error": r.y0 - reference}
            for r in report.rows]
    flags = []
    for a, b in zip(rows, rows[1:]):
        if abs(b["error"]) > abs(a["error"]) + 2 * max(a["stderr"], b["stderr"]):
            flags.append(f"error increases from n={a['n']} to n={b['n']}")
    slope = fitted_slope([r["h"] for r in rows], [r["error"] for r in rows])
    return ConvergenceTable(rows, float(reference), kind, slope, flags)


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_common(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--problem", help="builtin problem id")
    p.add_argument("--n", help="comma-separated step counts")
    p.add_argument("--paths", type=int, help="Monte Carlo paths M")
    p.add_argument("--engine", choices=["oracle", "regress1", "regress2"])
    p.add_argument("--basis", help="poly:DEGREE or pwlin:BINS")
    p.add_argument("--seed", type=int)
    p.add_argument("--perturb-eps", dest="perturb_eps", help="comma-separated epsilons")
    p.add_argument("--out", help="CSV output path (JSON mirror written alongside)")
    p.add_argument("--allow-h-override", dest="allow_h_override", action="store_true", default=None,
                   help="run even if the well-posedness gate fails; rows are marked")
    p.add_argument("--workers", type=int)
    p.add_argument("--m-g", dest="m_g", type=float, help="analytic m_G replacing the probed value")
    p.add_argument("--quad-nodes", dest="quad_nodes", type=int)
    p.add_argument("--centering", choices=["none", "mean", "linear"])
    p.add_argument("--timing", action="store_true", default=None,
                   help="fill the seconds column (makes reports run-dependent)")
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                   help="builtin problem parameter, repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pathctrl", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add_common(sub.add_parser("run", help="solve and write a report"))
    _add_common(sub.add_parser("converge", help="convergence study along the n ladder"))
    _add_common(sub.add_parser("check", help="well-posedness constants only"))
    return parser


def config_from_args(args) -> RunConfig:
    values = load_config(args.config) if args.config else {}
    for key in ("problem", "paths", "engine", "basis", "seed", "out", "workers", "m_g",
                "quad_nodes", "centering"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    if args.n is not None:
        values["n"] = tuple(_parse_list(args.n, int))
    if args.perturb_eps is not None:
        values["perturb_eps"] = tuple(_parse_list(args.perturb_eps, float))
    if args.allow_h_override:
        values["allow_h_override"] = True
    if args.timing:
        values["timing"] = True
    params = dict(values.get("params", {}))
    for item in args.param:
        key, sep, val = item.partition("=")
        if not sep:
            raise ValueError(f"--param expects KEY=VALUE, got {item!r}")
        params[key.strip()] = _parse_scalar(val)
    values["params"] = params
    if "problem" not in values:
        raise ValueError("no problem given (use --problem or the config key)")
    return RunConfig(**values)


def _check(config: RunConfig) -> str:
    lines = []
    for eps in list(config.perturb_eps) or [0.0]:
        lift = _build(config, eps)
        for n in config.n:
            wp = probe_wellposedness(lift, int(n), 16, config.seed)
            if config.m_g is not None:
                wp = wp.with_user_mg(config.m_g)
            h = lift.horizon / int(n)
            status = "ok" if wp.ok and wp.admits(h) else "FAIL"
            lines.append(f"eps={eps:g} n={n} h={h:.6g} m_g={wp.m_g:.6g} h0={wp.h0:.6g} "
                         f"violations={len(wp.violations)} heuristic={wp.heuristic} {status}")
            for v in wp.violations[:5]:
                lines.append(f"  violation: {v}")
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = config_from_args(args)
        if config.out:
            check_writable(config.out)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "check":
            text = _check(config)
            sys.stdout.write(text)
            return EXIT_OK if "FAIL" not in text else EXIT_ASSUMPTION
        if args.command == "converge":
            table = convergence_study(config)
            sys.stdout.write(table.text())
            if config.out:
                _atomic_write(config.out, table.text())
            return EXIT_OK
        report = run(config)
    except (AssumptionViolation, WellPosednessError) as exc:
        print(f"well-posedness gate failed: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except (EvaluationError, RegressionFailure, FloatingPointError, np.linalg.LinAlgError,
            PathCtrlError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if config.out:
        write_report(report, config.out)
    else:
        sys.stdout.write(report.csv_text())
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
