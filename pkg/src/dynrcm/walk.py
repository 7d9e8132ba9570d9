"""Exact event-driven simulation of the walk among dynamic conductances.

The walker at ``x`` holds until the integrated rate ``int mu_u(x) du``
reaches an Exp(1) variate; since rates are piecewise constant the holding
time is found by piecewise-linear inversion, with no time discretisation.
At the jump it moves right with probability ``w(x, x+1) / mu(x)``.

Random numbers come from a counter-based generator: the ``k``-th variate
of walker ``w`` under ``seed`` is a fixed hash of ``(seed, w, k)``, so a
walker's path never depends on how many other walkers ran or in which
order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field

import numba
import numpy as np
from numba import njit, prange

from .env import DynamicConductanceField
from .errors import ExplosionError, ParameterError

DEFAULT_MAX_JUMPS = 10**9
RECORD_MODES = ("full_path", "endpoint_only", "dyadic_times")

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_M53 = 2.0**-53


@njit(cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _walker_key(seed, walker):
    return _mix64(np.uint64(seed) ^ _mix64(np.uint64(walker) * _GOLDEN + np.uint64(1)))


@njit(cache=True, inline="always")
def _uniform(key, counter):
    # open interval (0, 1): never exactly 0, so -log(u) > 0
    bits = _mix64(key + (np.uint64(counter) + np.uint64(1)) * _GOLDEN)
    return (float(bits >> np.uint64(11)) + 0.5) * _TWO_M53


# -- double-double helpers for the reference inversion -------------------------
# (error-free transformations; Dekker/Knuth)


@njit(cache=True, inline="always")
def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


@njit(cache=True, inline="always")
def _two_prod(a, b):
    p = a * b
    c = 134217729.0 * a
    ah = c - (c - a)
    al = a - ah
    c = 134217729.0 * b
    bh = c - (c - b)
    bl = b - bh
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


@njit(cache=True, inline="always")
def _dd_add(ah, al, bh, bl):
    s, e = _two_sum(ah, bh)
    return _two_sum(s, e + al + bl)


@njit(cache=True, inline="always")
def _dd_mul(ah, al, b):
    p, e = _two_prod(ah, b)
    return _two_sum(p, e + al * b)


@njit(cache=True)
def _holding(starts, values, T, t, x, z):
    """Reference inversion carried out in double-double arithmetic.

    The returned ``h`` is within a few ulps of the exact inverse; the fast
    ensemble kernel uses plain doubles instead.
    """
    L = values.shape[1]
    xr = x % L
    xl = (x - 1) % L
    n = starts.shape[0]
    if n == 1 and T == np.inf:
        return z / (values[0, xr] + values[0, xl])
    # exact period integral of mu(x)
    ph, pl = 0.0, 0.0
    for k in range(n):
        end = starts[k + 1] if k + 1 < n else T
        dh, dl = _two_sum(end, -starts[k])
        ch, cl = _dd_mul(dh, dl, values[k, xr] + values[k, xl])
        ph, pl = _dd_add(ph, pl, ch, cl)
    # position inside the cycle: t - c T, kept exactly
    c = math.floor(t / T)
    p, e = _two_prod(c, T)
    th, tl = _dd_add(t, 0.0, -p, -e)
    if th < 0.0:
        th, tl = _dd_add(th, tl, T, 0.0)
    elif th >= T:
        th, tl = _dd_add(th, tl, -T, 0.0)
    k = np.searchsorted(starts, th, side="right") - 1
    if k < 0:
        k = 0
    zh, zl = z, 0.0
    hh, hl = 0.0, 0.0
    while True:
        r = values[k, xr] + values[k, xl]
        end = starts[k + 1] if k + 1 < n else T
        sh, sl = _dd_add(end, 0.0, -th, -tl)
        if sh > 0.0:
            ch, cl = _dd_mul(sh, sl, r)
            dh, dl = _dd_add(ch, cl, -zh, -zl)
            if dh >= 0.0:
                q = zh / r
                qp, qe = _two_prod(q, r)
                q2 = ((zh - qp) - qe + zl) / r
                hh, hl = _dd_add(hh, hl, q, q2)
                return hh + hl
            zh, zl = -dh, -dl
            hh, hl = _dd_add(hh, hl, sh, sl)
        k += 1
        th, tl = end, 0.0
        if k == n:
            k = 0
            th = 0.0
            if zh > ph:
                m = math.floor(zh / ph)
                if m > 1:
                    m -= 1  # stay strictly inside the remaining budget
                    mh, ml = _dd_mul(ph, pl, m)
                    zh, zl = _dd_add(zh, zl, -mh, -ml)
                    mh, ml = _two_prod(m, T)
                    hh, hl = _dd_add(hh, hl, mh, ml)


@njit(cache=True)
def _locate(starts, T, t):
    """Cycle and slab index containing absolute time ``t``."""
    if starts.shape[0] == 1:
        return 0, 0
    c = math.floor(t / T)
    tm = t - c * T
    if tm >= T:
        c += 1
        tm = 0.0
    k = np.searchsorted(starts, tm, side="right") - 1
    if k < 0:
        k = 0
    return c, k


@njit(cache=True, inline="always")
def _next_jump(starts, ends, mu, T, pmu, t, k, c, xm, z):
    # walker sits at absolute time t inside slab k of cycle c; returns the
    # jump time and the (slab, cycle) in force at that instant
    n = starts.shape[0]
    while True:
        r = mu[k, xm]
        tend = c * T + ends[k]
        seg = tend - t
        if seg > 0.0:
            cap = r * seg
            if cap >= z:
                tn = t + z / r
                if tn < tend:
                    return tn, k, c
                t = tend
                z = 0.0
            else:
                z -= cap
                t = tend
        k += 1
        if k == n:
            k = 0
            c += 1
            per = pmu[xm]
            if z > per:
                m = math.floor(z / per)
                if m * per >= z:
                    m -= 1
                if m > 0:
                    z -= m * per
                    c += m
                    t = c * T
        if z == 0.0:
            return t, k, c


@njit(cache=True, parallel=True)
def _ensemble_kernel(starts, ends, mu, pr, T, pmu, s, x0, rec, seed, walker_offset, max_jumps):
    n_walkers = x0.shape[0]
    n_rec = rec.shape[0]
    L = mu.shape[1]
    static = starts.shape[0] == 1 and T == np.inf
    out = np.empty((n_walkers, n_rec), dtype=np.int64)
    jumps = np.zeros(n_walkers, dtype=np.int64)
    c0, k0 = _locate(starts, T, s)
    for w in prange(n_walkers):
        key = _walker_key(seed, np.uint64(w) + walker_offset)
        t = s
        x = x0[w]
        xm = x % L
        c = c0
        k = k0
        n = 0
        j = 0
        while j < n_rec:
            if n >= max_jumps:
                jumps[w] = -1
                break
            z = -math.log(_uniform(key, 2 * n))
            if static:
                tn = t + z / mu[0, xm]
            else:
                tn, k, c = _next_jump(starts, ends, mu, T, pmu, t, k, c, xm, z)
            while j < n_rec and rec[j] < tn:
                out[w, j] = x
                j += 1
            if j == n_rec:
                jumps[w] = n
                break
            if _uniform(key, 2 * n + 1) < pr[k, xm]:
                x += 1
                xm += 1
                if xm == L:
                    xm = 0
            else:
                x -= 1
                xm -= 1
                if xm < 0:
                    xm = L - 1
            t = tn
            n += 1
    return out, jumps


@njit(cache=True)
def _path_kernel(starts, ends, mu, pr, T, pmu, s, x, t_end, seed, walker, max_jumps):
    key = _walker_key(seed, walker)
    L = mu.shape[1]
    static = starts.shape[0] == 1 and T == np.inf
    cap = 64
    times = np.empty(cap)
    sites = np.empty(cap, dtype=np.int64)
    t = s
    xm = x % L
    c, k = _locate(starts, T, s)
    n = 0
    while True:
        z = -math.log(_uniform(key, 2 * n))
        if static:
            tn = t + z / mu[0, xm]
        else:
            tn, k, c = _next_jump(starts, ends, mu, T, pmu, t, k, c, xm, z)
        if tn > t_end:
            break
        if n >= max_jumps:
            return times[:n], sites[:n], False
        if _uniform(key, 2 * n + 1) < pr[k, xm]:
            x += 1
        else:
            x -= 1
        xm = x % L
        if n == cap:
            cap *= 2
            nt = np.empty(cap)
            ns = np.empty(cap, dtype=np.int64)
            nt[:n] = times[:n]
            ns[:n] = sites[:n]
            times = nt
            sites = ns
        times[n] = tn
        sites[n] = x
        t = tn
        n += 1
    return times[:n], sites[:n], True


def _kernel_args(field: DynamicConductanceField):
    starts, values = field.slabs()
    starts = np.ascontiguousarray(starts, dtype=np.float64)
    ends = np.append(starts[1:], field.period)
    mu = values + np.roll(values, 1, axis=1)
    pr = values / mu
    pint = field.period_integral()
    pmu = pint + np.roll(pint, 1)
    return (
        starts,
        ends,
        np.ascontiguousarray(mu),
        np.ascontiguousarray(pr),
        float(field.period),
        np.ascontiguousarray(pmu),
    )


# -- public API ---------------------------------------------------------------


@dataclass(frozen=True)
class WalkerConfig:
    horizon: float
    seed: int = 0
    record_mode: str = "full_path"
    walker_id: int = 0
    dyadic_levels: int = 6
    max_jumps: int = DEFAULT_MAX_JUMPS

    def validate(self):
        if not (math.isfinite(self.horizon) and self.horizon >= 0):
            raise ParameterError("horizon must be a finite number >= 0")
        if self.record_mode not in RECORD_MODES:
            raise ParameterError(f"record_mode must be one of {RECORD_MODES}")
        if not 0 <= int(self.seed) < 2**64:
            raise ParameterError("seed must fit in an unsigned 64-bit integer")
        if self.max_jumps < 1:
            raise ParameterError("max_jumps must be positive")


@dataclass
class PathSample:
    """One quenched trajectory.

    ``jump_times``/``sites`` hold every jump for ``full_path`` records;
    the other modes keep only ``record_times``/``record_sites``.
    """

    start_time: float
    start_site: int
    horizon: float
    jump_times: np.ndarray = dc_field(default_factory=lambda: np.empty(0))
    sites: np.ndarray = dc_field(default_factory=lambda: np.empty(0, dtype=np.int64))
    n_jumps: int = 0
    record_times: np.ndarray = dc_field(default_factory=lambda: np.empty(0))
    record_sites: np.ndarray = dc_field(default_factory=lambda: np.empty(0, dtype=np.int64))
    record_mode: str = "full_path"

    @property
    def endpoint(self) -> int:
        if self.record_mode == "full_path":
            return int(self.sites[-1]) if len(self.sites) else self.start_site
        return int(self.record_sites[-1])

    def position(self, t):
        """Cadlag path value at absolute time(s) ``t``."""
        t = np.asarray(t, dtype=float)
        end = self.start_time + self.horizon
        if np.any(t < self.start_time) or np.any(t > end):
            raise ParameterError("time outside the simulated window")
        if self.record_mode == "full_path":
            idx = np.searchsorted(self.jump_times, t, side="right")
            sites = np.concatenate(([self.start_site], self.sites))
            return sites[idx]
        pos = np.searchsorted(self.record_times, t)
        hit = pos < len(self.record_times)
        ok = hit & (self.record_times[np.minimum(pos, len(self.record_times) - 1)] == t)
        if not np.all(ok):
            raise ParameterError("path was not recorded at the requested time")
        return self.record_sites[pos]


def sample_holding(field: DynamicConductanceField, t0: float, x: int, z: float) -> float:
    """Exact ``h >= 0`` with ``int_{t0}^{t0+h} mu_u(x) du = z``."""
    if z < 0:
        raise ParameterError("z must be nonnegative")
    if z == 0:
        return 0.0
    starts, values = field.slabs()
    return float(
        _holding(starts, values, float(field.period), float(t0), int(x), float(z))
    )


def sample_jump_target(field: DynamicConductanceField, t: float, x: int, u: float) -> int:
    right = field.eval(t, x)
    left = field.eval(t, x - 1)
    return x + 1 if u < right / (right + left) else x - 1


def simulate(field: DynamicConductanceField, s: float, x: int, cfg: WalkerConfig) -> PathSample:
    """Trajectory from ``(s, x)`` over ``[s, s + cfg.horizon]``."""
    cfg.validate()
    args = _kernel_args(field)
    end = s + cfg.horizon
    if cfg.record_mode == "full_path":
        times, sites, ok = _path_kernel(
            *args, float(s), int(x), float(end),
            np.uint64(cfg.seed), np.uint64(cfg.walker_id), int(cfg.max_jumps),
        )
        if not ok:
            raise ExplosionError(f"more than {cfg.max_jumps} jumps before time {end}")
        return PathSample(s, x, cfg.horizon, times, sites, len(times))
    if cfg.record_mode == "endpoint_only":
        rec = np.array([end])
    else:
        rec = s + cfg.horizon * np.arange(2**cfg.dyadic_levels + 1) / 2**cfg.dyadic_levels
    out, jumps = _ensemble_kernel(
        *args, float(s), np.array([x], dtype=np.int64), rec,
        np.uint64(cfg.seed), np.uint64(cfg.walker_id), int(cfg.max_jumps),
    )
    if jumps[0] < 0:
        raise ExplosionError(f"more than {cfg.max_jumps} jumps before time {end}")
    return PathSample(
        s, x, cfg.horizon, n_jumps=int(jumps[0]), record_times=rec,
        record_sites=out[0], record_mode=cfg.record_mode,
    )


def simulate_positions(
    field: DynamicConductanceField,
    times,
    n_walkers: int,
    seed: int,
    s: float = 0.0,
    x=0,
    walker_offset: int = 0,
    max_jumps: int = DEFAULT_MAX_JUMPS,
    threads: int | None = None,
):
    """Positions of ``n_walkers`` independent walkers at the absolute ``times``.

    Walker ``i`` is identical to ``simulate(..., WalkerConfig(walker_id=i +
    walker_offset))``.  ``x`` may be one site or one per walker.  Returns
    ``(positions[n_walkers, n_times], jump_counts)``.
    """
    rec = np.asarray(times, dtype=float)
    if rec.ndim != 1 or np.any(np.diff(rec) < 0):
        raise ParameterError("record times must be a sorted 1-d sequence")
    if len(rec) and rec[0] < s:
        raise ParameterError("record times must not precede the start time")
    x0 = np.broadcast_to(np.asarray(x, dtype=np.int64), (n_walkers,)).copy()
    args = _kernel_args(field)
    if threads is not None:
        numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))
    out, jumps = _ensemble_kernel(
        *args, float(s), x0, rec,
        np.uint64(seed), np.uint64(walker_offset), int(max_jumps),
    )
    if np.any(jumps < 0):
        bad = int(np.argmax(jumps < 0))
        raise ExplosionError(f"walker {bad} exceeded {max_jumps} jumps")
    return out, jumps


def rescale(path: PathSample, n: int, times) -> np.ndarray:
    """Diffusive rescaling ``X_{n^2 t} / n`` at each requested ``t``."""
    if n < 1:
        raise ParameterError("n must be a positive integer")
    t = np.asarray(times, dtype=float)
    if np.any(t < 0) or np.any(n * n * t > path.horizon):
        raise ParameterError("rescaled time outside the path horizon")
    return path.position(path.start_time + n * n * t) / n


def write_paths_csv(paths, fh) -> None:
    """Rows ``walker_id, jump_index, time, site``; index 0 is the start point."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["walker_id", "jump_index", "time", "site"])
    for wid, p in enumerate(paths):
        w.writerow([wid, 0, repr(float(p.start_time)), p.start_site])
        for k, (t, x) in enumerate(zip(p.jump_times, p.sites), start=1):
            w.writerow([wid, k, repr(float(t)), int(x)])


def write_endpoints_csv(times, positions, fh, scale: float = 1.0) -> None:
    """Rows ``walker_id, time, value`` with ``value = position / scale``."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["walker_id", "time", "value"])
    for wid, row in enumerate(positions):
        for t, x in zip(times, row):
            w.writerow([wid, repr(float(t)), repr(float(x) / scale)])
