"""Monte Carlo statistics for the invariance principle and its ingredients.

An :class:`Ensemble` stores positions of independent walkers in one fixed
(quenched) field at a common grid of record times.  Everything here is a
deterministic function of the ensemble; the randomness lives entirely in
:func:`sample_ensemble`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
from scipy.special import ndtr

from .corrector import HarmonicTable, variance_formula
from .env import DynamicConductanceField
from .errors import ConsistencyError, ParameterError
from .walk import DEFAULT_MAX_JUMPS, simulate_positions

MIN_WALKERS = 1000
MIN_KS_SAMPLE = 100
KS_C95 = 1.36


@dataclass
class Ensemble:
    """Positions ``positions[walker, k]`` at absolute times ``times[k]``."""

    field: DynamicConductanceField
    times: np.ndarray
    positions: np.ndarray
    seed: int
    start_time: float = 0.0
    start_site: int = 0
    jumps: np.ndarray | None = None

    @property
    def n_walkers(self) -> int:
        return self.positions.shape[0]

    @property
    def horizon(self) -> float:
        return float(self.times[-1]) if len(self.times) else self.start_time

    def index(self, t: float) -> int:
        """Column of the record time equal to ``t`` (relative tolerance 1e-12)."""
        hit = np.flatnonzero(np.isclose(self.times, t, rtol=1e-12, atol=1e-12))
        if not len(hit):
            raise ParameterError(f"time {t} is not a record time of the ensemble")
        return int(hit[0])

    def at(self, t: float) -> np.ndarray:
        """Positions at the absolute time ``t`` (the start time is always available)."""
        if math.isclose(t, self.start_time, abs_tol=1e-12) and not np.any(
                np.isclose(self.times, t, atol=1e-12)):
            return np.full(self.n_walkers, self.start_site, dtype=np.int64)
        return self.positions[:, self.index(t)]


def sample_ensemble(field: DynamicConductanceField, times, n_walkers: int, seed: int,
                    start_time: float = 0.0, start_site: int = 0,
                    max_jumps: int = DEFAULT_MAX_JUMPS, threads: int | None = None) -> Ensemble:
    """Run ``n_walkers`` walkers from ``(start_time, start_site)`` and record them at ``times``."""
    if n_walkers < 1:
        raise ParameterError("need at least one walker")
    times = np.asarray(times, dtype=float)
    pos, jumps = simulate_positions(field, times, n_walkers, seed, s=start_time, x=start_site,
                                    max_jumps=max_jumps, threads=threads)
    return Ensemble(field, times, pos, int(seed), float(start_time), int(start_site), jumps)


# -- variance -------------------------------------------------------------------------


def jackknife_variance(d: np.ndarray) -> tuple[float, float]:
    """Sample variance of ``d`` and its delete-one jackknife standard error."""
    d = np.asarray(d, dtype=float)
    n = len(d)
    if n < 3:
        raise ParameterError("need at least three values")
    d = d - d.mean()  # shift for numerical stability; variance is shift invariant
    s1, s2 = d.sum(), np.dot(d, d)
    var = (s2 - s1 * s1 / n) / (n - 1)
    m_i = (s1 - d) / (n - 1)
    var_i = (s2 - d * d - (n - 1) * m_i * m_i) / (n - 2)
    se = math.sqrt((n - 1) / n * float(np.sum((var_i - var_i.mean()) ** 2)))
    return float(var), se


def estimate_sigma2(ensemble: Ensemble, t: float) -> tuple[float, float]:
    """``Var(X_t) / t`` (``t`` elapsed since the start) with jackknife error."""
    if ensemble.n_walkers < MIN_WALKERS:
        raise ParameterError(f"need at least {MIN_WALKERS} walkers, got {ensemble.n_walkers}")
    if not t > 0:
        raise ParameterError("t must be positive")
    x = ensemble.at(ensemble.start_time + t)
    var, se = jackknife_variance(x - ensemble.start_site)
    return var / t, se / t


def variance_regression(ensemble: Ensemble, elapsed) -> tuple[float, float]:
    """Least-squares slope of ``Var(X_t)`` against ``t`` and the fit's R^2."""
    ts = np.asarray(elapsed, dtype=float)
    v = np.array([np.var(ensemble.at(ensemble.start_time + t), ddof=1) for t in ts])
    slope, icpt = np.polyfit(ts, v, 1)
    resid = v - (slope * ts + icpt)
    ss = float(np.sum((v - v.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss if ss > 0 else 1.0
    return float(slope), r2


# -- Kolmogorov-Smirnov -------------------------------------------------------------------


def ks_statistic(sample, sigma2: float) -> float:
    """Sup distance between the empirical CDF of ``sample`` and ``N(0, sigma2)``."""
    if not sigma2 > 0:
        raise ParameterError("sigma2 must be positive")
    x = np.sort(np.asarray(sample, dtype=float))
    m = len(x)
    if m == 0:
        raise ParameterError("empty sample")
    F = ndtr(x / math.sqrt(sigma2))
    i = np.arange(1, m + 1)
    return float(max(np.max(i / m - F), np.max(F - (i - 1) / m)))


def ks_gaussian(sample, sigma2: float) -> tuple[float, float, bool]:
    """One-sample KS test against ``N(0, sigma2)`` at the asymptotic 95% level."""
    m = len(sample)
    if m < MIN_KS_SAMPLE:
        raise ParameterError(f"KS test needs at least {MIN_KS_SAMPLE} values, got {m}")
    D = ks_statistic(sample, sigma2)
    thr = KS_C95 / math.sqrt(m)
    return D, thr, bool(D < thr)


def lattice_jitter(values, spacing: float, seed: int) -> np.ndarray:
    """Spread lattice-valued data uniformly over their cells.

    Adds independent ``U(-spacing/2, spacing/2)`` noise.  A lattice sample
    has atoms, so its empirical CDF sits about half an atom away from any
    continuous CDF even when the law is right; the jittered sample has a
    continuous law with the same limit (the added variance is
    ``spacing^2 / 12``) and can be fed to :func:`ks_gaussian` at its nominal
    level.
    """
    values = np.asarray(values, dtype=float)
    rng = np.random.default_rng(seed)
    return values + spacing * (rng.random(values.shape) - 0.5)


def ks_rejection_rate(m: int, repetitions: int, seed: int, sigma2: float = 1.0) -> float:
    """Fraction of true-null Gaussian samples rejected by :func:`ks_gaussian`."""
    rng = np.random.default_rng(seed)
    rejected = 0
    for _ in range(repetitions):
        sample = rng.normal(0.0, math.sqrt(sigma2), m)
        rejected += not ks_gaussian(sample, sigma2)[2]
    return rejected / repetitions


def dyadic_max(ensemble: Ensemble, n: int, levels: int = 6) -> np.ndarray:
    """``max_k |X_{n^2 k 2^-levels}| / n`` over the dyadic grid of ``[0, 1]``.

    A path functional whose law converges to that of the running maximum of
    ``sigma |B|`` sampled on the same grid.
    """
    grid = ensemble.start_time + n * n * np.arange(1, 2**levels + 1) / 2**levels
    cols = [ensemble.at(t) - ensemble.start_site for t in grid]
    return np.max(np.abs(np.stack(cols, axis=1)), axis=1) / n


def brownian_dyadic_max(sigma2: float, levels: int, size: int, seed: int) -> np.ndarray:
    """Reference sample of the same dyadic maximum for ``sqrt(sigma2) B``."""
    rng = np.random.default_rng(seed)
    steps = rng.normal(0.0, math.sqrt(sigma2 / 2**levels), (size, 2**levels))
    return np.max(np.abs(np.cumsum(steps, axis=1)), axis=1)


# -- martingale diagnostics --------------------------------------------------------------


def _check_same(ensemble: Ensemble, table: HarmonicTable):
    if not ensemble.field.same_environment(table.field):
        raise ConsistencyError("ensemble and harmonic table use different environments")


def _harmonic(ensemble: Ensemble, table: HarmonicTable, t: float) -> np.ndarray:
    x = ensemble.at(t)
    return table.phi(np.full(len(x), t), x)


def martingale_residual(ensemble: Ensemble, table: HarmonicTable, lags, window_starts=None):
    """Mean increments of ``M_t = Phi(t, X_t)`` over windows of each lag.

    For a lag ``h`` the windows are ``[t, t + h]`` for ``t`` in
    ``window_starts`` (default: ``start, start + 2h, start + 4h, ...``, so
    windows are separated by gaps and do not telescope) whose ends are
    record times.  Each walker contributes the
    average of its window increments; the standard error is taken across
    walkers, which are independent.  Returns rows ``(lag, mean, stderr)``.
    """
    _check_same(ensemble, table)
    recorded = np.concatenate([[ensemble.start_time], ensemble.times])
    rows = []
    for h in lags:
        if not h > 0:
            raise ParameterError("lags must be positive")
        if window_starts is None:
            starts = []
            t = ensemble.start_time
            while t + h <= ensemble.horizon * (1 + 1e-12):
                starts.append(t)
                t += 2 * h
        else:
            starts = [float(s) for s in window_starts]
        pairs = [(s, s + h) for s in starts
                 if np.any(np.isclose(recorded, s, atol=1e-12))
                 and np.any(np.isclose(recorded, s + h, atol=1e-12))]
        if not pairs:
            raise ParameterError(f"no recorded window of length {h}")
        cache = {}

        def M(t):
            if t not in cache:
                cache[t] = _harmonic(ensemble, table, t)
            return cache[t]

        per_walker = np.mean([M(b) - M(a) for a, b in pairs], axis=0)
        mean = float(per_walker.mean())
        se = float(per_walker.std(ddof=1) / math.sqrt(len(per_walker)))
        rows.append((float(h), mean, se))
    return rows


def qv_match(ensemble: Ensemble, table: HarmonicTable, t: float) -> tuple[float, float, float]:
    """``(E[(M_t - M_0)^2] / t, variance_formula, ratio)`` with ``t`` elapsed."""
    _check_same(ensemble, table)
    if not t > 0:
        raise ParameterError("t must be positive")
    s = ensemble.start_time
    inc = _harmonic(ensemble, table, s + t) - _harmonic(ensemble, table, s)
    emp = float(np.mean(inc * inc)) / t
    formula = variance_formula(table)
    return emp, formula, emp / formula


# -- reporting --------------------------------------------------------------------------------


@dataclass
class StatReport:
    """Collected diagnostics of one experiment, with the config that produced them."""

    sigma2_mc: float | None = None
    sigma2_stderr: float | None = None
    sigma2_formula: float | None = None
    ks_stats: list = dc_field(default_factory=list)
    martingale_residuals: list = dc_field(default_factory=list)
    qv: dict | None = None
    sublinearity: list = dc_field(default_factory=list)
    checks: dict = dc_field(default_factory=dict)
    metadata: dict = dc_field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def failed_checks(self) -> list[str]:
        return [k for k, ok in self.checks.items() if not ok]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialize {type(v).__name__}")
