"""Space-time averaged norms, Dirichlet forms and moment conditions.

Space-time functions are callables ``u(t, sites) -> array`` (one value per
site) or plain arrays, which are taken constant in time.  Time integrals
run over segments: exact when ``u`` is piecewise constant between the
supplied breakpoints, otherwise by the composite midpoint rule.

Infinite exponents are ``math.inf`` and always mean a maximum.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .env import DynamicConductanceField
from .errors import ParameterError

INF = math.inf


@dataclass(frozen=True)
class SpaceTimeBox:
    """``Q = [t0, t1] x B`` with ``B`` a contiguous block of sites."""

    t0: float
    t1: float
    lo: int
    hi: int

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ParameterError("box interval must have positive length")
        if self.hi < self.lo:
            raise ParameterError("box needs at least one site")

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)

    @property
    def n_sites(self) -> int:
        return self.hi - self.lo + 1

    @property
    def duration(self) -> float:
        return self.t1 - self.t0


@dataclass(frozen=True)
class NormSpec:
    p: float
    q: float

    def __post_init__(self):
        for v in (self.p, self.q):
            if not v > 0:
                raise ParameterError("norm exponents must be positive")


def box_Q(n: int) -> SpaceTimeBox:
    """Parabolic box ``[0, n^2] x {-n, ..., n}``."""
    if int(n) != n or n < 1:
        raise ParameterError("n must be an integer >= 1")
    n = int(n)
    return SpaceTimeBox(0.0, float(n * n), -n, n)


def scaled_box(n: int, sigma: float) -> SpaceTimeBox:
    """``[0, sigma n^2] x B(sigma n)`` with ``B(r) = {|x| <= floor(r)}``."""
    r = math.floor(sigma * n)
    return SpaceTimeBox(0.0, sigma * n * n, -r, r)


# -- time segmentation ----------------------------------------------------------


def segments(box: SpaceTimeBox, breakpoints=None, max_step: float | None = None):
    """Midpoints and lengths of the time segments covering ``box``."""
    pts = [box.t0, box.t1]
    if breakpoints is not None:
        bp = np.asarray(breakpoints, dtype=float)
        pts.extend(bp[(bp > box.t0) & (bp < box.t1)])
    pts = np.unique(pts)
    if max_step is not None:
        fine = [pts[:1]]
        for a, b in zip(pts[:-1], pts[1:]):
            m = max(1, math.ceil((b - a) / max_step))
            fine.append(np.linspace(a, b, m + 1)[1:])
        pts = np.concatenate(fine)
    return 0.5 * (pts[:-1] + pts[1:]), np.diff(pts)


def _values(u, times, sites):
    if callable(u):
        return np.array([np.asarray(u(t, sites), dtype=float) for t in times])
    arr = np.asarray(u, dtype=float)
    return np.broadcast_to(arr, (len(times), len(sites)))


def _space_mean(vals, p):
    a = np.abs(vals)
    top = a.max(axis=-1)
    if math.isinf(p):
        return top
    # scale by the row maximum so that powers neither underflow nor overflow
    scale = np.where(top > 0, top, 1.0)
    return scale * np.mean((a / scale[..., None]) ** p, axis=-1) ** (1.0 / p)


def _time_mean(s, lengths, q):
    top = float(np.max(s[lengths > 0]))
    if math.isinf(q) or top == 0:
        return top
    return top * float((np.sum(lengths * (s / top) ** q) / np.sum(lengths)) ** (1.0 / q))


def st_norm(u, spec, box: SpaceTimeBox, breakpoints=None, max_step: float | None = None) -> float:
    """Locally averaged norm ``||u||_{p,q,Q}``.

    With ``breakpoints`` and no ``max_step`` the integrand is taken piecewise
    constant between breakpoints (exact).  Without breakpoints the midpoint
    rule with steps of at most 1 is used.  Exponents below 1 are allowed.
    """
    p, q = (spec.p, spec.q) if isinstance(spec, NormSpec) else spec
    NormSpec(p, q)
    if breakpoints is None and max_step is None:
        max_step = 1.0
    mids, lengths = segments(box, breakpoints, max_step)
    vals = _values(u, mids, box.sites)
    return _time_mean(_space_mean(vals, p), lengths, q)


# -- field-derived quantities -------------------------------------------------------


def mu_function(field: DynamicConductanceField):
    return lambda t, x: field.mu(t, x)


def nu_function(field: DynamicConductanceField):
    return lambda t, x: field.nu(t, x)


def dirichlet_energy(field: DynamicConductanceField, t: float, f, sites, squared: bool = True) -> float:
    """``sum_e w_t(e) (grad f(e))^2`` over bonds touching ``sites`` (``f = 0`` elsewhere).

    ``f`` holds one value per entry of the contiguous ``sites``.  With
    ``squared=False`` the unsquared oriented sum ``sum w (f(y) - f(y+1))``
    is returned instead.
    """
    sites = np.asarray(sites)
    f = np.asarray(f, dtype=float)
    if f.shape != sites.shape:
        raise ParameterError("f needs one value per site")
    lo = int(sites.min())
    padded = np.concatenate(([0.0], f, [0.0]))
    left = np.arange(lo - 1, lo + len(sites))
    grad = padded[:-1] - padded[1:]
    w = field.eval(t, left)
    return float(np.sum(w * grad * grad)) if squared else float(np.sum(w * grad))


class SobolevResult(NamedTuple):
    lhs: float
    rhs: float
    holds: bool


def sobolev_check(field: DynamicConductanceField, u, box: SpaceTimeBox, q_prime: float,
                  breakpoints=None, max_step: float | None = None,
                  squared: bool = True) -> SobolevResult:
    """Both sides of the weighted space-time Sobolev inequality on ``box``.

    ``lhs = ||u^2||_{inf, q'/(q'+1), Q}`` and
    ``rhs = |B|^2 ||nu||_{1, q', Q} * avg_t E_t(u_t) / |B|``.
    ``u(t, .)`` must vanish outside ``box.sites``; ``breakpoints`` are the
    change times of ``u`` (the field's own are added automatically).
    """
    if not q_prime >= 1:
        raise ParameterError("q' must be >= 1")
    bps = field.breakpoints(box.t0, box.t1)
    if breakpoints is not None:
        bps = np.concatenate([bps, np.asarray(breakpoints, dtype=float)])
    mids, lengths = segments(box, bps, max_step)
    sites = box.sites
    vals = _values(u, mids, sites)
    r = 1.0 if math.isinf(q_prime) else q_prime / (q_prime + 1.0)
    lhs = _time_mean(_space_mean(vals**2, INF), lengths, r)
    nu = np.array([field.nu(t, sites) for t in mids])
    nu_norm = _time_mean(_space_mean(nu, 1.0), lengths, q_prime)
    energy = np.array([dirichlet_energy(field, t, v, sites, squared) for t, v in zip(mids, vals)])
    avg_energy = float(np.sum(lengths * energy) / np.sum(lengths)) / box.n_sites
    rhs = box.n_sites**2 * nu_norm * avg_energy
    return SobolevResult(lhs, rhs, bool(lhs <= rhs * (1.0 + 1e-12)))


# -- moment conditions ----------------------------------------------------------------


def _inv(v):
    return 0.0 if math.isinf(v) else 1.0 / v


def condition_1d(p: float, q: float) -> bool:
    """``1/(p-1) + 1/((p-1) q) < 1``; false for ``p <= 1``."""
    if not p > 1:
        return False
    return _inv(p - 1) + _inv(p - 1) * _inv(q) < 1.0


def condition_d(p: float, q: float, d: int, allow_low_dimension: bool = False) -> bool:
    """``1/(p-1) + 1/((p-1) q) + 1/q < 2/d``.

    Meant for ``d >= 2``; ``allow_low_dimension`` evaluates the same formula
    at ``d = 1`` for comparisons.
    """
    if d < 2 and not allow_low_dimension:
        raise ParameterError("condition_d needs d >= 2; use condition_1d")
    if d < 1:
        raise ParameterError("dimension must be positive")
    if not p > 1:
        return False
    return _inv(p - 1) + _inv(p - 1) * _inv(q) + _inv(q) < 2.0 / d


def _conj_factor(v):
    # v / (v - 1), the Hoelder conjugate of v divided by... i.e. 1 for v = inf
    if math.isinf(v):
        return 1.0
    if v <= 1:
        return INF
    return v / (v - 1.0)


def condition_int(p: float, p_prime: float, q_prime: float, q: float | None = None, d: int = 1) -> bool:
    """Separate space/time integrability condition.

    ``d = 1``: ``(1/p) (p'/(p'-1)) ((q'+1)/q') < 1``; ``d >= 2`` adds ``1/q``
    on the left and compares with ``2/d``.
    """
    for v in (p, p_prime, q_prime):
        if not v >= 1:
            raise ParameterError("exponents must lie in [1, inf]")
    time_factor = 1.0 if math.isinf(q_prime) else (q_prime + 1.0) / q_prime
    lhs = _inv(p) * _conj_factor(p_prime) * time_factor
    if d == 1:
        return lhs < 1.0
    if q is None:
        raise ParameterError("d >= 2 needs q")
    return lhs + _inv(q) < 2.0 / d


def condition_grid(p_values, q_values):
    """Rows ``(p, q, holds)`` of ``condition_1d`` over a grid."""
    return [(float(p), float(q), condition_1d(p, q)) for p in p_values for q in q_values]


def write_condition_grid(rows, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["p", "q", "satisfied"])
    for p, q, ok in rows:
        w.writerow([repr(p), repr(q), int(ok)])


def q_threshold(p: float) -> float:
    """Smallest ``q`` boundary for ``p > 2``: the condition holds iff ``q > 1/(p-2)``."""
    if not p > 2:
        return INF
    return _inv(p - 2)


# -- energy diagnostics ------------------------------------------------------------------


def conjugate(v: float) -> float:
    """Hoelder conjugate exponent."""
    if math.isinf(v):
        return 1.0
    if v == 1:
        return INF
    return v / (v - 1.0)


def cutoff(n: int, sigma: float) -> callable:
    """Cut-off equal to 1 on ``B(sigma n)``, 0 outside ``B(n - 1)``, linear between."""
    inner = math.floor(sigma * n)
    if inner >= n:
        raise ParameterError("sigma * n must be below n")

    def eta(x):
        x = np.abs(np.asarray(x, dtype=float))
        return np.clip((n - x) / (n - inner), 0.0, 1.0)

    return eta


@dataclass(frozen=True)
class EnergyReport:
    sup_term: float
    dirichlet_term: float
    mu_norm: float
    u_norm: float
    gamma: float
    rhs_bound: float
    implied_constant: float
    interpolation_exponent: float
    interpolation_lhs: float
    interpolation_rhs: float

    @property
    def lhs(self) -> float:
        return self.sup_term + self.dirichlet_term


def _ratio(a, b):
    if b > 0:
        return a / b
    return 0.0 if a == 0 else INF


def energy_quantities(field: DynamicConductanceField, u, n: int, sigma: float, alpha: float,
                      specs, breakpoints=None, max_step: float = 1.0) -> EnergyReport:
    """Both sides of one Moser step for ``u`` on ``Q(n)`` and ``Q(sigma n)``.

    ``specs = (p, p', q')``.  The energy side is
    ``|| |u|^{2a} ||_{1,inf,Q(sigma n)} + int_{I(sigma n)} E_t(eta |u_t|^a) / |B(n)| dt``
    and the bound is ``||mu||_{p,p',Q(n)} || |u|^{2a} ||_{p*,p*',Q(n)}^{gamma/(2a)}``;
    their ratio is the implied constant.  The interpolation step is reported
    for its own exponent ``1/p* + q'/(p* (q'+1))``.
    """
    if not 0 < sigma < 1:
        raise ParameterError("sigma must lie in (0, 1)")
    if not alpha >= 1:
        raise ParameterError("alpha must be >= 1")
    p, pp, qq = specs
    Qn = box_Q(n)
    Qs = scaled_box(n, sigma)
    bps = field.breakpoints(Qn.t0, Qn.t1)
    if breakpoints is not None:
        bps = np.concatenate([bps, np.asarray(breakpoints, dtype=float)])

    @lru_cache(maxsize=None)
    def _u_row(t):
        return np.abs(np.asarray(u(t, Qn.sites), dtype=float))

    def power(a):
        def f(t, x):
            row = _u_row(float(t))
            return row[np.asarray(x) - Qn.lo] ** a
        return f

    sup_term = st_norm(power(2 * alpha), (1.0, INF), Qs, bps, max_step)
    eta = cutoff(n, sigma)(Qn.sites)
    mids, lengths = segments(Qs, bps, max_step)
    energies = np.array([
        dirichlet_energy(field, t, eta * _u_row(float(t)) ** alpha, Qn.sites) for t in mids
    ])
    dirichlet_term = float(np.sum(lengths * energies)) / Qn.n_sites

    ps, pps = conjugate(p), conjugate(pp)
    mu_norm = st_norm(mu_function(field), (p, pp), Qn, bps, max_step)
    u_norm = st_norm(power(2 * alpha), (ps, pps), Qn, bps, max_step)
    gamma = 1.0 if u_norm >= 1 else 1.0 - 1.0 / alpha
    # u = 0 makes the estimate trivial; take the factor as 0 rather than 0**0
    rhs = mu_norm * u_norm ** (gamma / (2 * alpha)) if u_norm > 0 else 0.0

    a_int = 1.0 / ps + (1.0 if math.isinf(qq) else qq / (qq + 1.0)) / ps
    r = 1.0 if math.isinf(qq) else qq / (qq + 1.0)
    v = power(2 * a_int)
    i_lhs = st_norm(v, (a_int * ps, a_int * pps), Qs, bps, max_step)
    i_rhs = st_norm(v, (1.0, INF), Qs, bps, max_step) + st_norm(v, (INF, r), Qs, bps, max_step)
    return EnergyReport(sup_term, dirichlet_term, mu_norm, u_norm, gamma, rhs,
                        _ratio(sup_term + dirichlet_term, rhs), a_int, i_lhs, i_rhs)


def corrector_function(table, scale: float = 1.0):
    """``(t, x) -> chi(t, x) / scale`` with per-time caching of the periodic part."""

    @lru_cache(maxsize=4096)
    def row(t):
        return table.psi_at([t])[0]

    def u(t, x):
        x = np.asarray(x)
        ps = row(float(t))
        chi = -(table.slope - 1.0) * x - (ps[x % table.L] - table.psi00)
        return chi / scale

    return u


# -- randomized Sobolev instances ------------------------------------------------------------


@dataclass
class SobolevInstance:
    field: DynamicConductanceField
    u: object
    box: SpaceTimeBox
    q_prime: float
    breakpoints: np.ndarray


def _piecewise_u(times: np.ndarray, values: np.ndarray, lo: int):
    """Space-time function with ``u(t, x) = values[k, x - lo]`` on ``[times[k], times[k+1])``."""

    def u(t, x):
        k = max(0, int(np.searchsorted(times, t, side="right")) - 1)
        x = np.asarray(x) - lo
        out = np.zeros(x.shape)
        inside = (x >= 0) & (x < values.shape[1])
        out[inside] = values[k, x[inside]]
        return out

    return u


def random_sobolev_instances(count: int, seed: int):
    """Yield ``count`` random (field, piecewise-constant u, box, q') instances.

    Fields mix static and switching environments with weights spread over
    several orders of magnitude; ``u`` has a few random change times,
    random sparsity and is supported in the box.
    """
    from .env import EnvironmentModel, Marginal, build_environment

    rng = np.random.default_rng(seed)
    marginals = (
        Marginal("uniform", low=0.1, high=10.0),
        Marginal("two_point", low=0.01, high=5.0, prob_low=0.3),
        Marginal("pareto", alpha=1.5, scale=0.5, side="inverse"),
    )
    for _ in range(count):
        L = int(rng.integers(2, 13))
        marg = marginals[int(rng.integers(len(marginals)))]
        if rng.random() < 0.4:
            model = EnvironmentModel("static-iid", marg)
            T = None
        else:
            model = EnvironmentModel("markov-switching", marg, switch_rate=float(rng.uniform(0.1, 2.0)))
            T = float(rng.uniform(1.0, 5.0))
        field = build_environment(model, L, T, int(rng.integers(2**32)))
        t0 = float(rng.uniform(0.0, 3.0))
        lo = int(rng.integers(-6, 6))
        box = SpaceTimeBox(t0, t0 + float(rng.uniform(0.2, 4.0)), lo, lo + int(rng.integers(0, 8)))
        k = int(rng.integers(1, 5))
        cuts = np.sort(rng.uniform(box.t0, box.t1, k - 1))
        times = np.concatenate([[box.t0], cuts])
        vals = rng.normal(size=(k, box.n_sites)) * (rng.random((k, box.n_sites)) < 0.7)
        q_prime = INF if rng.random() < 0.15 else float(rng.uniform(1.0, 8.0))
        yield SobolevInstance(field, _piecewise_u(times, vals, box.lo), box, q_prime, cuts)
