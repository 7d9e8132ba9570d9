"""Experiment runner: ``dynrcm --config run.toml``.

A run is described by one TOML file::

    experiment = "verify-qip"

    [environment]
    kind = "constant"
    marginal = { kind = "point", value = 1.0 }

    [sizes]
    L = 8
    walkers = 20000
    horizon = 100.0
    n = [5, 10]

    [seeds]
    environment = 1
    walk = 2

Exit status: 0 when every enabled check passes, 1 when one fails (named on
stderr), 2 when the config cannot be parsed or validated.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import re
import sys
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import norms
from .corrector import generator_residual, pde_residual, solve, sublinearity_profile, variance_formula
from .env import MODEL_KINDS, EnvironmentModel, Marginal, build_environment, save_field
from .errors import ExplosionError, ParameterError, SolverError
from .stats import (StatReport, estimate_sigma2, ks_gaussian, lattice_jitter,
                    martingale_residual, qv_match, sample_ensemble)
from .walk import write_endpoints_csv

EXPERIMENTS = ("simulate", "corrector", "verify-qip", "sublinearity", "check-conditions", "sobolev-test")
OUT_ENV = "DYNRCM_OUT"
MAX_WALKERS = 10**8
MAX_L = 10**6
U64 = 2**64

DEFAULT_TOLERANCES = {
    "sigma2_rel": 0.03,
    "qv_rel": 0.03,
    "martingale_z": 3.0,
    "pde_residual": 1e-9,
    "generator_residual": 1e-10,
}


class ConfigError(Exception):
    """Invalid config; ``str()`` carries the field name and, when known, the line."""


@dataclass
class ExperimentConfig:
    experiment: str
    model: EnvironmentModel | None
    L: int | None
    T: float | None
    walkers: int
    horizon: float
    n_values: list
    env_seed: int
    walk_seed: int
    output: str | None
    threads: int | None
    tolerances: dict
    lags: list
    L_per_n: int | None = None
    T_per_n2: float | None = None
    p_range: tuple = (1.1, 6.0)
    q_range: tuple = (1.0, 6.0)
    grid_points: int = 50
    instances: int = 1000
    source: dict = dc_field(default_factory=dict)


# -- parsing ---------------------------------------------------------------------------------


def _line_of(text: str, dotted: str) -> int | None:
    """Best-effort line number of a dotted key (or of its enclosing table)."""
    parts = dotted.split(".")
    lines = text.splitlines()
    section = None
    for i, line in enumerate(lines, 1):
        s = line.strip()
        m = re.match(r"\[\s*([^\]]+?)\s*\]", s)
        if m:
            section = m.group(1)
            continue
        key = re.match(r"([A-Za-z0-9_\-]+)\s*=", s)
        if key and key.group(1) == parts[-1] and (section or "") == ".".join(parts[:-1]):
            return i
    for i, line in enumerate(lines, 1):
        if re.match(rf"\[\s*{re.escape('.'.join(parts[:-1]) or parts[0])}\s*\]", line.strip()):
            return i
    return None


class _Reader:
    def __init__(self, data: dict, text: str):
        self.data = data
        self.text = text

    def fail(self, dotted: str, msg: str):
        line = _line_of(self.text, dotted)
        where = f"line {line}: " if line else ""
        raise ConfigError(f"{where}field '{dotted}': {msg}")

    def get(self, dotted: str, default=KeyError):
        node = self.data
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                if default is KeyError:
                    self.fail(dotted, "missing")
                return default
            node = node[part]
        return node

    def table(self, dotted: str) -> dict:
        v = self.get(dotted, {})
        if not isinstance(v, dict):
            self.fail(dotted, "must be a table")
        return v

    def integer(self, dotted, default=KeyError, lo=None, hi=None):
        v = self.get(dotted, default)
        if v is None:
            return None
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(dotted, f"must be an integer, got {v!r}")
        if lo is not None and v < lo:
            self.fail(dotted, f"must be >= {lo}")
        if hi is not None and v > hi:
            self.fail(dotted, f"must be <= {hi}")
        return v

    def real(self, dotted, default=KeyError, positive=False, allow_inf=False):
        v = self.get(dotted, default)
        if v is None:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(dotted, f"must be a number, got {v!r}")
        v = float(v)
        if math.isnan(v) or (math.isinf(v) and not allow_inf):
            self.fail(dotted, "must be finite")
        if positive and not v > 0:
            self.fail(dotted, "must be positive")
        return v

    def reals(self, dotted, default=KeyError, positive=False):
        v = self.get(dotted, default)
        if v is None:
            return None
        if not isinstance(v, list):
            self.fail(dotted, "must be a list of numbers")
        out = []
        for x in v:
            if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
                self.fail(dotted, f"bad entry {x!r}")
            if positive and not x > 0:
                self.fail(dotted, "entries must be positive")
            out.append(float(x))
        return out


def _parse_model(r: _Reader) -> EnvironmentModel:
    env = r.table("environment")
    if not env:
        r.fail("environment", "missing")
    kind = r.get("environment.kind")
    if kind not in MODEL_KINDS:
        r.fail("environment.kind", f"must be one of {', '.join(MODEL_KINDS)}")
    m = r.table("environment.marginal")
    allowed = set(Marginal.__dataclass_fields__)
    for k in m:
        if k not in allowed:
            r.fail(f"environment.marginal.{k}", "unknown key")
    try:
        marginal = Marginal(**m)
    except TypeError as exc:
        r.fail("environment.marginal", str(exc))
    if kind == "constant" and not m:
        marginal = Marginal("point", 1.0)
    if kind in ("constant", "static-iid", "markov-switching"):
        for k, v in m.items():
            if k in ("kind", "side"):
                if not isinstance(v, str):
                    r.fail(f"environment.marginal.{k}", "must be a string")
            else:
                r.real(f"environment.marginal.{k}")
        try:
            marginal.validate()
        except ParameterError as exc:
            r.fail("environment.marginal", str(exc))
    pattern = r.reals("environment.pattern", [], positive=True)
    if kind == "static-deterministic-periodic" and not pattern:
        r.fail("environment.pattern", "missing")
    durations = r.reals("environment.slab_durations", [], positive=True)
    raw = r.get("environment.slab_patterns", [])
    if not isinstance(raw, list):
        r.fail("environment.slab_patterns", "must be a list of lists")
    patterns = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, list) or not entry:
            r.fail("environment.slab_patterns", f"entry {i} must be a non-empty list")
        patterns.append(tuple(_positive_list(r, entry, "environment.slab_patterns")))
    if kind == "time-periodic-deterministic":
        if not durations or len(durations) != len(patterns):
            r.fail("environment.slab_durations", "need one positive duration per slab pattern")
    rate = r.real("environment.switch_rate", 0.0)
    if rate < 0:
        r.fail("environment.switch_rate", "must be >= 0")
    return EnvironmentModel(kind, marginal, rate, tuple(pattern), tuple(durations), tuple(patterns))


def _positive_list(r, values, dotted):
    out = []
    for x in values:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not (math.isfinite(x) and x > 0):
            r.fail(dotted, f"bad weight {x!r}")
        out.append(float(x))
    return out


def parse_config(text: str) -> ExperimentConfig:
    """Parse and fully validate a TOML config; raises :class:`ConfigError`."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from None
    r = _Reader(data, text)
    exp = r.get("experiment")
    if exp not in EXPERIMENTS:
        r.fail("experiment", f"must be one of {', '.join(EXPERIMENTS)}")

    needs_env = exp not in ("check-conditions", "sobolev-test")
    model = _parse_model(r) if needs_env else None
    r.table("sizes")
    L_per_n = r.integer("sizes.L_per_n", None, lo=1, hi=1000)
    T_per_n2 = r.real("sizes.T_per_n2", None, positive=True)
    L = r.integer("sizes.L", None if (not needs_env or L_per_n) else KeyError, lo=2, hi=MAX_L)
    T = r.real("sizes.T", None, positive=True)
    if model is not None and model.kind == "markov-switching" and T is None and T_per_n2 is None:
        r.fail("sizes.T", "missing (markov-switching needs a time period)")
    if model is not None and model.kind == "time-periodic-deterministic" and T is not None:
        if not math.isclose(T, sum(model.slab_durations), rel_tol=1e-12):
            r.fail("sizes.T", "must equal the sum of slab durations")
    walkers_needed = exp in ("simulate", "verify-qip")
    walkers = r.integer("sizes.walkers", KeyError if walkers_needed else 1000, lo=1, hi=MAX_WALKERS)
    horizon = r.real("sizes.horizon", KeyError if walkers_needed else 1.0, positive=True)
    n_default = KeyError if exp == "sublinearity" else []
    n_values = r.get("sizes.n", n_default)
    if not isinstance(n_values, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) and 1 <= v <= 10**4 for v in n_values):
        r.fail("sizes.n", "must be a list of integers in [1, 10000]")
    if exp == "sublinearity" and not n_values:
        r.fail("sizes.n", "must not be empty")
    if exp == "verify-qip" and walkers < 1000:
        r.fail("sizes.walkers", "verify-qip needs at least 1000 walkers")
    if exp == "verify-qip" and n_values and walkers < 100:
        r.fail("sizes.walkers", "KS needs at least 100 walkers")

    r.table("seeds")
    env_seed = r.integer("seeds.environment", 0, lo=0, hi=U64 - 1)
    walk_seed = r.integer("seeds.walk", 1, lo=0, hi=U64 - 1)
    output = r.get("output", None)
    if output is not None and not isinstance(output, str):
        r.fail("output", "must be a string path")
    threads = r.integer("run.threads", None, lo=1, hi=1024)

    tol = dict(DEFAULT_TOLERANCES)
    for k, v in r.table("tolerances").items():
        if k not in tol:
            r.fail(f"tolerances.{k}", "unknown tolerance")
        tol[k] = r.real(f"tolerances.{k}", positive=True)
    lags = r.reals("martingale.lags", [1.0, 10.0], positive=True)

    r.table("conditions")
    p_range = tuple(r.reals("conditions.p_range", [1.1, 6.0]))
    q_range = tuple(r.reals("conditions.q_range", [1.0, 6.0]))
    for name, rg in (("p_range", p_range), ("q_range", q_range)):
        if len(rg) != 2 or not 1.0 <= rg[0] <= rg[1]:
            r.fail(f"conditions.{name}", "must be [lo, hi] with 1 <= lo <= hi")
    grid_points = r.integer("conditions.grid_points", 50, lo=2, hi=2000)
    instances = r.integer("sobolev.instances", 1000, lo=1, hi=10**6)
    return ExperimentConfig(exp, model, L, T, walkers, horizon, list(n_values), env_seed, walk_seed,
                            output, threads, tol, lags, L_per_n, T_per_n2, p_range, q_range,
                            grid_points, instances, data)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text)


# -- experiments ---------------------------------------------------------------------------------


def _build(cfg: ExperimentConfig, L=None, T=None):
    L = L or cfg.L
    T = T if T is not None else cfg.T
    if cfg.model.kind == "time-periodic-deterministic":
        T = None
    try:
        return build_environment(cfg.model, int(L), T, cfg.env_seed)
    except ParameterError as exc:
        raise ConfigError(f"field 'environment': {exc}") from None


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def run_simulate(cfg, out: Path, report: StatReport):
    field = _build(cfg)
    save_field(field, out / "field.json")
    times = sorted({float(n * n) for n in cfg.n_values if n * n <= cfg.horizon} | {cfg.horizon})
    ens = sample_ensemble(field, times, cfg.walkers, cfg.walk_seed, threads=cfg.threads)
    with open(out / "endpoints.csv", "w", newline="") as fh:
        write_endpoints_csv(ens.times, ens.positions, fh)
    report.metadata["mean_jumps"] = float(np.mean(ens.jumps))
    if cfg.walkers >= 1000:
        s2, se = estimate_sigma2(ens, cfg.horizon)
        report.sigma2_mc, report.sigma2_stderr = s2, se


def run_corrector(cfg, out: Path, report: StatReport, strict=False):
    field = _build(cfg)
    save_field(field, out / "field.json")
    table = solve(field)
    with open(out / "harmonic.csv", "w", newline="") as fh:
        table.write_csv(fh)
    report.sigma2_formula = variance_formula(table)
    if table.is_static:
        res = generator_residual(table)
        report.metadata["generator_residual"] = res
        report.checks["generator_residual"] = res < cfg.tolerances["generator_residual"]
    else:
        res = pde_residual(table)
        report.metadata["pde_residual"] = res
        report.checks["pde_residual"] = res < cfg.tolerances["pde_residual"]


def run_verify_qip(cfg, out: Path, report: StatReport, strict=False):
    field = _build(cfg)
    save_field(field, out / "field.json")
    table = solve(field)
    formula = variance_formula(table)
    report.sigma2_formula = formula
    ks_n = [n for n in cfg.n_values if n * n <= cfg.horizon]
    span = min(cfg.horizon, 10.0 * max(cfg.lags))
    step = min(cfg.lags)
    grid = set(np.round(np.arange(1, int(span / step) + 1) * step, 12).tolist())
    times = sorted(grid | {float(n * n) for n in ks_n} | {cfg.horizon})
    ens = sample_ensemble(field, times, cfg.walkers, cfg.walk_seed, threads=cfg.threads)

    s2, se = estimate_sigma2(ens, cfg.horizon)
    report.sigma2_mc, report.sigma2_stderr = s2, se
    report.checks["sigma2"] = abs(s2 / formula - 1.0) <= cfg.tolerances["sigma2_rel"]
    _write_csv(out / "sigma2.csv", ["t", "sigma2_mc", "stderr", "sigma2_formula"],
               [(cfg.horizon, s2, se, formula)])

    emp, form, ratio = qv_match(ens, table, cfg.horizon)
    report.qv = {"empirical": emp, "formula": form, "ratio": ratio}
    report.checks["qv"] = abs(ratio - 1.0) <= cfg.tolerances["qv_rel"]

    ks_rows = []
    for n in ks_n:
        raw = ens.at(float(n * n)) / n
        D, thr, ok = ks_gaussian(lattice_jitter(raw, 1.0 / n, cfg.walk_seed + n), formula)
        ks_rows.append((n, D, thr, ok))
        report.checks[f"ks_n{n}"] = ok
    report.ks_stats = ks_rows
    _write_csv(out / "ks.csv", ["n", "D", "threshold", "pass"], ks_rows)

    rows = martingale_residual(ens, table, cfg.lags)
    report.martingale_residuals = rows
    z = cfg.tolerances["martingale_z"]
    for h, mean, se_m in rows:
        report.checks[f"martingale_lag{h:g}"] = abs(mean) <= z * se_m
    _write_csv(out / "martingale.csv", ["lag", "mean", "stderr"], rows)


def run_sublinearity(cfg, out: Path, report: StatReport, strict=False):
    rows = []
    for n in cfg.n_values:
        L = cfg.L_per_n * n if cfg.L_per_n else cfg.L
        T = cfg.T_per_n2 * n * n if cfg.T_per_n2 else cfg.T
        field = _build(cfg, L, T)
        rows.extend(sublinearity_profile(field, [n]))
    report.sublinearity = rows
    _write_csv(out / "sublinearity.csv", ["n", "linf", "l1"], rows)
    linf = np.array([r[1] for r in rows])
    if np.all(linf == 0) or len(rows) < 2:
        report.checks["sublinearity"] = bool(np.all(linf < 1e-9)) or len(rows) < 2
    else:
        ns = np.log([r[0] for r in rows])
        slope_inf = float(np.polyfit(ns, np.log(linf), 1)[0])
        slope_1 = float(np.polyfit(ns, np.log([max(r[2], 1e-300) for r in rows]), 1)[0])
        report.metadata["loglog_slope_linf"] = slope_inf
        report.metadata["loglog_slope_l1"] = slope_1
        report.checks["sublinearity"] = slope_inf < 0 and slope_1 < 0


def run_check_conditions(cfg, out: Path, report: StatReport, strict=False):
    ps = np.linspace(*cfg.p_range, cfg.grid_points)
    qs = np.linspace(*cfg.q_range, cfg.grid_points)
    rows = norms.condition_grid(ps, qs)
    with open(out / "conditions.csv", "w", newline="") as fh:
        norms.write_condition_grid(rows, fh)
    report.checks["p4_q1_satisfied"] = norms.condition_1d(4.0, 1.0)
    report.checks["p3_q1_violated"] = not norms.condition_1d(3.0, 1.0)
    report.checks["static_reduction"] = (norms.condition_int(1.5, math.inf, math.inf)
                                         and not norms.condition_int(1.0, math.inf, math.inf))
    report.metadata["feasible_fraction"] = float(np.mean([ok for _, _, ok in rows]))


def run_sobolev(cfg, out: Path, report: StatReport, strict=False):
    rows = []
    for i, inst in enumerate(norms.random_sobolev_instances(cfg.instances, cfg.env_seed)):
        res = norms.sobolev_check(inst.field, inst.u, inst.box, inst.q_prime, inst.breakpoints)
        row = [i, inst.q_prime, res.lhs, res.rhs, res.holds]
        if strict:
            st = norms.sobolev_check(inst.field, inst.u, inst.box, inst.q_prime, inst.breakpoints,
                                     squared=False)
            row += [st.rhs, st.holds]
        rows.append(row)
    header = ["instance", "q_prime", "lhs", "rhs", "holds"]
    if strict:
        header += ["rhs_unsquared", "holds_unsquared"]
        report.metadata["unsquared_violations"] = sum(1 for r in rows if not r[-1])
    _write_csv(out / "sobolev.csv", header, rows)
    report.metadata["violations"] = sum(1 for r in rows if not r[4])
    report.checks["sobolev"] = all(r[4] for r in rows)


RUNNERS = {
    "simulate": run_simulate,
    "corrector": run_corrector,
    "verify-qip": run_verify_qip,
    "sublinearity": run_sublinearity,
    "check-conditions": run_check_conditions,
    "sobolev-test": run_sobolev,
}


def output_dir(cfg: ExperimentConfig, override: str | None = None) -> Path:
    if override:
        return Path(override)
    if cfg.output:
        return Path(cfg.output)
    return Path(os.environ.get(OUT_ENV, "dynrcm-out")) / cfg.experiment


def run(cfg: ExperimentConfig, out: Path, strict_sobolev: bool = False) -> tuple[int, StatReport]:
    """Run one experiment into ``out``; returns ``(exit status, report)``."""
    out.mkdir(parents=True, exist_ok=True)
    report = StatReport(metadata={
        "config": _plain(cfg.source),
        "experiment": cfg.experiment,
        "seeds": {"environment": cfg.env_seed, "walk": cfg.walk_seed},
        "strict_sobolev": strict_sobolev,
    })
    runner = RUNNERS[cfg.experiment]
    if cfg.experiment == "simulate":
        runner(cfg, out, report)
    else:
        runner(cfg, out, report, strict=strict_sobolev)
    (out / "report.json").write_text(report.to_json())
    return (0 if report.passed else 1), report


def _plain(d):
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, list):
        return [_plain(v) for v in d]
    if isinstance(d, float) and not math.isfinite(d):
        return repr(d)
    return d


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="dynrcm", description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True, help="TOML experiment file")
    ap.add_argument("--out", help=f"output directory (default: config 'output' or ${OUT_ENV}/<experiment>)")
    ap.add_argument("--seed-override", type=int, metavar="U64",
                    help="replace both seeds (environment = s, walk = s + 1 mod 2^64)")
    ap.add_argument("--threads", type=int, help="worker threads for walker ensembles")
    ap.add_argument("--strict-sobolev", action="store_true",
                    help="also report the unsquared-gradient reading of the Dirichlet form")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed_override is not None:
            if not 0 <= args.seed_override < U64:
                raise ConfigError("--seed-override must be an unsigned 64-bit integer")
            cfg.env_seed = args.seed_override
            cfg.walk_seed = (args.seed_override + 1) % U64
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            cfg.threads = args.threads
        status, report = run(cfg, output_dir(cfg, args.out), args.strict_sobolev)
    except ConfigError as exc:
        print(f"dynrcm: config error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, ExplosionError) as exc:
        print(f"dynrcm: check failed: solve: {exc}", file=sys.stderr)
        return 1
    if status:
        print(f"dynrcm: check failed: {', '.join(report.failed_checks())}", file=sys.stderr)
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
