"""Harmonic coordinates and the corrector on a periodic space-time cell.

On a ring of ``L`` sites the harmonic coordinate is written as
``Phi(t, x) = slope * x + psi(t, x mod L) - psi(0, 0)`` with ``psi``
periodic in space and time.  ``d/dt Phi + L_t Phi = 0`` becomes the affine
ODE ``d psi/dt = -(A_t psi + b_t)``, where ``A_t`` is the ring generator and
``b_t = L_t x`` the drift of the position.  Run backwards in time this is a
Markov-semigroup evolution, so each slab is propagated exactly by a matrix
exponential (dense for small rings, uniformization otherwise) and the
time-periodic solution is the fixed point of the one-period map.

The corrector is ``chi(t, x) = x - Phi(t, x)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, sparse
from scipy.special import pdtr
from scipy.stats import poisson

from .env import DynamicConductanceField
from .errors import ParameterError, SolverError

DENSE_MAX_L = 64
DEFAULT_TOL = 1e-9
_CACHE_BYTES = 256 * 2**20
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(10)


# -- ring generator pieces -----------------------------------------------------


def ring_generator(w: np.ndarray) -> np.ndarray:
    """Dense generator of the walk on the ring with edge weights ``w``."""
    L = len(w)
    A = np.zeros((L, L))
    for x in range(L):
        A[x, (x + 1) % L] += w[x]
        A[x, (x - 1) % L] += w[x - 1]
        A[x, x] -= w[x] + w[x - 1]
    return A


def _ring_generator_sparse(w):
    L = len(w)
    idx = np.arange(L)
    rows = np.concatenate([idx, idx, idx])
    cols = np.concatenate([(idx + 1) % L, (idx - 1) % L, idx])
    vals = np.concatenate([w, np.roll(w, 1), -(w + np.roll(w, 1))])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(L, L))


def position_drift(w: np.ndarray) -> np.ndarray:
    """``(L_t x)(x) = w(x, x+1) - w(x-1, x)``."""
    return w - np.roll(w, 1)


def _augmented(w):
    L = len(w)
    G = np.zeros((L + 1, L + 1))
    G[:L, :L] = ring_generator(w)
    G[:L, L] = position_drift(w)
    return G


def _gradient_operator(L):
    # rows: edges {e, e+1}; columns: psi_0..psi_{L-1}, constant 1 (slope part)
    D = np.zeros((L, L + 1))
    for e in range(L):
        D[e, (e + 1) % L] += 1.0
        D[e, e] -= 1.0
        D[e, L] = 1.0
    return D


# -- slab propagators ------------------------------------------------------------


def _dense_propagator(w, tau):
    E = linalg.expm(tau * _augmented(w))
    L = len(w)
    return E[:L, :L], E[:L, L]


def _uniformization_terms(rate, tau, tol):
    lam = rate * tau
    # smallest K with P(N > K) <= tol and integral tail <= tol
    K = int(poisson.ppf(1.0 - tol, lam)) + 1 if lam > 0 else 0
    ks = np.arange(K + 1)
    pmf = poisson.pmf(ks, lam)
    surv = 1.0 - pdtr(ks, lam)
    surv = np.clip(surv, 0.0, 1.0)
    return ks, pmf, surv


def _uniformized_propagator(w, tau, tol):
    """``e^{tau A}`` and ``int_0^tau e^{sA} b ds`` by uniformization.

    With ``P = I + A/rate`` stochastic, ``e^{tau A} = sum_k Pois(k) P^k`` and
    the integral weights are ``P(N > k) / rate``.  The truncation keeps the
    discarded Poisson mass and integral tail below ``tol`` in sup norm.
    """
    L = len(w)
    A = _ring_generator_sparse(w)
    rate = float(np.max(w + np.roll(w, 1)))
    b = position_drift(w)
    P = sparse.identity(L, format="csr") + A / rate
    ks, pmf, surv = _uniformization_terms(rate, tau, tol)
    M = np.eye(L)
    v = b.copy()
    E = np.zeros((L, L))
    c = np.zeros(L)
    for k in range(len(ks)):
        E += pmf[k] * M
        c += surv[k] / rate * v
        M = P @ M
        v = P @ v
    # remaining integral tail: sum_{k>K} P(N>k)/rate * P^k b, bounded by
    # |b|_inf / rate * (E[N] - sum_{k<=K} P(N>k))
    tail = max(0.0, rate * tau - surv.sum()) * np.max(np.abs(b)) / rate
    if tail > 10 * tol * max(1.0, np.max(np.abs(b))):
        raise SolverError(f"uniformization tail {tail:.3g} above tolerance")
    return E, c


def propagator(w, tau, tol=DEFAULT_TOL, method=None):
    """Backward slab map ``psi(t_end - tau) = P psi(t_end) + c``."""
    if method is None:
        method = "dense" if len(w) <= DENSE_MAX_L else "uniformization"
    if tau == 0:
        return np.eye(len(w)), np.zeros(len(w))
    if method == "dense":
        return _dense_propagator(w, tau)
    if method == "uniformization":
        return _uniformized_propagator(w, tau, tol)
    raise ParameterError(f"unknown propagator method {method!r}")


# -- tables --------------------------------------------------------------------------


class HarmonicTable:
    """Harmonic coordinate on slab boundaries of one period.

    ``psi[k]`` is the periodic part at ``slab_times[k]``; the last row is the
    value at ``T`` and equals the first.  Static tables have one row and
    ``period = inf``.
    """

    def __init__(self, field, slab_times, slab_values, psi, period, slope=1.0,
                 method="explicit", tol=DEFAULT_TOL):
        self.field = field
        self.slab_times = np.asarray(slab_times, dtype=float)
        self.slab_values = np.asarray(slab_values, dtype=float)
        self.psi = np.asarray(psi, dtype=float)
        self.period = float(period)
        self.slope = float(slope)
        self.method = method
        self.tol = tol

    @property
    def L(self) -> int:
        return self.psi.shape[1]

    @property
    def is_static(self) -> bool:
        return math.isinf(self.period)

    @property
    def psi00(self) -> float:
        return float(self.psi[0, 0])

    def with_slope(self, slope: float) -> "HarmonicTable":
        """Same periodic part with a different linear part (for negative controls)."""
        return HarmonicTable(self.field, self.slab_times, self.slab_values, self.psi,
                             self.period, slope, self.method, self.tol)

    def psi_at(self, t) -> np.ndarray:
        """Periodic part ``psi(t, .)`` for each requested time, shape ``(len(t), L)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.is_static:
            return np.repeat(self.psi[:1], len(t), axis=0)
        T = self.period
        tm = np.mod(t, T)
        tm[tm >= T] = 0.0
        n = len(self.slab_values)
        k = np.clip(np.searchsorted(self.slab_times, tm, side="right") - 1, 0, n - 1)
        out = np.empty((len(t), self.L))
        cache = {}
        for i, (ki, ti) in enumerate(zip(k, tm)):
            if ti == self.slab_times[ki]:
                out[i] = self.psi[ki]
                continue
            tau = self.slab_times[ki + 1] - ti
            key = (ki, tau)
            if key not in cache:
                cache[key] = propagator(self.slab_values[ki], tau, self.tol, _method(self.method))
            P, c = cache[key]
            out[i] = P @ self.psi[ki + 1] + c
        return out

    def phi(self, t, x) -> np.ndarray:
        """``Phi(t, x)`` for matching arrays ``t`` and ``x`` (broadcast)."""
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x))
        flat_t = t.ravel()
        flat_x = x.ravel().astype(np.int64)
        uniq, inv = np.unique(flat_t, return_inverse=True)
        ps = self.psi_at(uniq)
        vals = self.slope * flat_x + ps[inv, flat_x % self.L] - self.psi00
        return vals.reshape(t.shape)

    def chi(self, t, x) -> np.ndarray:
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x))
        return x - self.phi(t, x)

    def corrector(self) -> "CorrectorTable":
        return CorrectorTable(self)

    def write_csv(self, fh) -> None:
        """Rows ``slab_time, site, phi, chi`` on slab boundaries of one period."""
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slab_time", "site", "phi", "chi"])
        times = self.slab_times[:-1] if not self.is_static else [0.0]
        for k, t in enumerate(times):
            for x in range(self.L):
                phi = self.slope * x + self.psi[k, x] - self.psi00
                w.writerow([repr(float(t)), x, repr(float(phi)), repr(float(x - phi))])


def _method(m):
    return None if m == "explicit" else m


@dataclass
class CorrectorTable:
    """``chi = x - Phi`` on the grid of a harmonic table."""

    table: HarmonicTable

    @property
    def grid(self) -> np.ndarray:
        """``chi`` at slab boundaries (rows) and ring sites ``0..L-1`` (columns)."""
        x = np.arange(self.table.L)
        return -(self.table.slope - 1.0) * x - (self.table.psi - self.table.psi00)

    def __call__(self, t, x):
        return self.table.chi(t, x)


# -- solvers ------------------------------------------------------------------------


def _ring_values(field, L):
    starts, values = field.slabs()
    if L is None:
        L = field.L
    if L % field.L:
        raise ParameterError(f"L={L} is not a multiple of the field period {field.L}")
    return starts, np.tile(values, (1, L // field.L)), L


def solve_static(field: DynamicConductanceField, L: int | None = None) -> HarmonicTable:
    """Explicit harmonic coordinate of a time-constant field.

    ``Phi(x) = c * sum_{0 <= j < x} 1 / w_j`` with ``c = L / sum_j 1 / w_j``,
    so ``Phi(x + L) = Phi(x) + L``.
    """
    if not field.is_static:
        raise ParameterError("solve_static needs a time-constant field")
    _, values, L = _ring_values(field, L)
    w = values[0]
    inv = 1.0 / w
    c = L / inv.sum()
    phi = c * np.concatenate(([0.0], np.cumsum(inv)[:-1]))
    psi = (phi - np.arange(L))[None, :]
    return HarmonicTable(field, [0.0], values, psi, math.inf, 1.0, "explicit")


def solve_dynamic(field: DynamicConductanceField, L: int | None = None,
                  T: float | None = None, tol: float = DEFAULT_TOL,
                  method: str | None = None) -> HarmonicTable:
    """Time-periodic harmonic coordinate of a piecewise-constant periodic field.

    ``method`` is ``dense`` or ``uniformization``; by default dense up to
    ``L = 64``.  A static field is treated as one slab of length ``T``
    (default 1).
    """
    starts, values, L = _ring_values(field, L)
    if field.is_static:
        T = 1.0 if T is None else float(T)
        bounds = np.array([0.0, T])
    else:
        if T is not None and not math.isclose(T, field.period, rel_tol=1e-12):
            raise ParameterError(f"T={T} does not match the field period {field.period}")
        T = field.period
        bounds = np.append(starts, T)
    if not (math.isfinite(T) and T > 0):
        raise ParameterError("T must be positive and finite")
    if method is None:
        method = "dense" if L <= DENSE_MAX_L else "uniformization"
    n = len(values)
    taus = np.diff(bounds)

    keep = n * L * (L + 1) * 8 <= _CACHE_BYTES
    maps = []
    P = np.eye(L)
    c = np.zeros(L)
    for k in range(n - 1, -1, -1):
        Pk, ck = propagator(values[k], taus[k], tol, method)
        if keep:
            maps.append((Pk, ck))
        c = Pk @ c + ck
        P = Pk @ P
    if keep:
        maps.reverse()

    M = np.eye(L) - P + np.full((L, L), 1.0 / L)
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > 1e12:
        raise SolverError(f"monodromy system is singular (cond={cond:.3g})")
    psi_T = np.linalg.solve(M, c)

    psi = np.empty((n + 1, L))
    psi[n] = psi_T
    for k in range(n - 1, -1, -1):
        Pk, ck = maps[k] if keep else propagator(values[k], taus[k], tol, method)
        psi[k] = Pk @ psi[k + 1] + ck
    mismatch = np.max(np.abs(psi[0] - psi[n]))
    if mismatch > tol * max(1.0, np.max(np.abs(psi))):
        raise SolverError(f"time-periodicity defect {mismatch:.3g} exceeds tol")
    psi[n] = psi[0]
    if field.is_static:
        return HarmonicTable(field, [0.0], values, psi[:1], math.inf, 1.0, method, tol)
    return HarmonicTable(field, bounds, values, psi, T, 1.0, method, tol)


def solve(field: DynamicConductanceField, tol: float = DEFAULT_TOL) -> HarmonicTable:
    """Explicit solution for static fields, periodic solve otherwise."""
    return solve_static(field) if field.is_static else solve_dynamic(field, tol=tol)


# -- diagnostics ----------------------------------------------------------------------


def generator_residual(table: HarmonicTable) -> float:
    """``max_x |L Phi(x)|`` for a static table."""
    if not table.is_static:
        raise ParameterError("generator_residual applies to static tables")
    w = table.slab_values[0]
    L = table.L
    x = np.arange(L)
    phi = table.slope * x + table.psi[0] - table.psi00
    right = table.slope * (x + 1) + np.roll(table.psi[0], -1) - table.psi00
    left = table.slope * (x - 1) + np.roll(table.psi[0], 1) - table.psi00
    return float(np.max(np.abs(w * (right - phi) + np.roll(w, 1) * (left - phi))))


def pde_residual(table: HarmonicTable) -> float:
    """Largest slab defect of ``d Phi/dt + L_t Phi = 0`` in integrated form.

    For each slab ``[s, e]`` this is ``|psi(s) - psi(e) - int_s^e (A psi + b) dt|``
    with the integral by composite Gauss-Legendre quadrature on the solved
    trajectory.  Static tables fall back to ``generator_residual``.
    """
    if table.is_static:
        return generator_residual(table)
    worst = 0.0
    for k, w in enumerate(table.slab_values):
        s, e = table.slab_times[k], table.slab_times[k + 1]
        A = ring_generator(w)
        # drift of the slope part: slope * L_t x
        b = table.slope * position_drift(w)
        rate = float(np.max(w + np.roll(w, 1)))
        m = max(1, math.ceil((e - s) * rate / 0.5))
        edges = np.linspace(s, e, m + 1)
        nodes = (0.5 * (edges[1:, None] - edges[:-1, None]) * _GL_NODES[None, :]
                 + 0.5 * (edges[1:, None] + edges[:-1, None]))
        wts = 0.5 * (edges[1:, None] - edges[:-1, None]) * _GL_WEIGHTS[None, :]
        ps = _psi_in_slab(table, k, nodes.ravel())
        integral = (wts.ravel()[:, None] * (ps @ A.T + b)).sum(axis=0)
        defect = table.psi[k] - table.psi[k + 1] - integral
        worst = max(worst, float(np.max(np.abs(defect))))
    return worst


def _psi_in_slab(table, k, times):
    w = table.slab_values[k]
    e = table.slab_times[k + 1]
    out = np.empty((len(times), table.L))
    for i, t in enumerate(times):
        P, c = propagator(w, e - t, table.tol, _method(table.method))
        out[i] = P @ table.psi[k + 1] + c
    return out


def variance_formula(table: HarmonicTable) -> float:
    """Effective variance ``sigma^2`` as a space-time average of the energy density.

    ``(1/(T L)) int_0^T sum_x sum_{y ~ x} w_t(x, y) (Phi(t, y) - Phi(t, x))^2 dt``,
    integrated exactly per slab (Van Loan block exponential) for dense
    tables and by Gauss-Legendre quadrature otherwise.
    """
    L = table.L
    D = _gradient_operator(L)
    D[:, L] *= table.slope
    if table.is_static:
        g = D @ np.append(table.psi[0], 1.0)
        return float(2.0 / L * np.sum(table.slab_values[0] * g * g))
    total = 0.0
    for k, w in enumerate(table.slab_values):
        tau = table.slab_times[k + 1] - table.slab_times[k]
        Q = D.T @ (w[:, None] * D)
        y = np.append(table.psi[k + 1], 1.0)
        if table.method == "dense":
            G = _augmented(w)
            n = L + 1
            C = np.zeros((2 * n, 2 * n))
            C[:n, :n] = -G.T
            C[:n, n:] = Q
            C[n:, n:] = G
            F = linalg.expm(tau * C)
            gram = F[n:, n:].T @ F[:n, n:]
            total += float(y @ gram @ y)
        else:
            rate = float(np.max(w + np.roll(w, 1)))
            m = max(1, math.ceil(tau * rate / 0.5))
            edges = np.linspace(0.0, tau, m + 1)
            for a, bnd in zip(edges[:-1], edges[1:]):
                for node, wt in zip(_GL_NODES, _GL_WEIGHTS):
                    s = 0.5 * (bnd - a) * node + 0.5 * (bnd + a)
                    P, c = propagator(w, s, table.tol, "uniformization")
                    z = np.append(P @ table.psi[k + 1] + c, 1.0)
                    total += 0.5 * (bnd - a) * wt * float(z @ Q @ z)
    return 2.0 * total / (table.period * L)


def chi_split_check(field: DynamicConductanceField, table: HarmonicTable | CorrectorTable,
                    t: float, tol: float = DEFAULT_TOL) -> float:
    """Defect of ``chi(t, x) = chi_0(shifted environment, x) + chi(t, 0)``.

    The right side is recomputed from scratch on ``field.shift(t, 0)``.
    """
    if isinstance(table, CorrectorTable):
        table = table.table
    x = np.arange(table.L)
    lhs = table.chi(t, x) - table.chi(t, 0)
    shifted = field.shift(t, 0)
    other = solve_static(shifted, table.L) if field.is_static else \
        solve_dynamic(shifted, table.L, tol=tol, method=_method(table.method))
    rhs = other.chi(0.0, x)
    return float(np.max(np.abs(lhs - rhs)))


def cocycle_check(table: HarmonicTable, t: float = 0.0) -> float:
    """Defect of the space cocycle identity for the time-``t`` slice of ``chi``.

    For every ``x`` in one period the increment ``chi_0(tau_x w, y - x)`` is
    recomputed on the space-shifted environment and compared with
    ``chi(t, y) - chi(t, x)`` for ``y`` over three periods.
    """
    field = table.field
    L = table.L
    ys = np.arange(-L, 2 * L)
    base = table.chi(t, ys) - table.chi(t, 0)
    worst = 0.0
    for x in range(L):
        shifted = field.shift(t, x)
        other = solve_static(shifted, L) if field.is_static else \
            solve_dynamic(shifted, L, tol=table.tol, method=_method(table.method))
        inc = other.chi(0.0, ys - x) - other.chi(0.0, 0)
        diff = inc - (base - base[x + L])
        worst = max(worst, float(np.max(np.abs(diff))))
    return worst


# -- sublinearity -----------------------------------------------------------------------


def _time_nodes(table, t_end, max_step):
    """Sub-step boundaries and midpoints covering ``[0, t_end]``.

    Returns ``(edges, mids)`` where consecutive ``edges`` bound steps no
    longer than ``max_step`` that never straddle a slab boundary.
    """
    if table.is_static or t_end == 0:
        return np.array([0.0, t_end]), np.array([0.5 * t_end])
    T = table.period
    bounds = table.slab_times
    cycles = math.floor(t_end / T)
    pts = [bounds[:-1] + c * T for c in range(cycles + 1)]
    pts = np.concatenate(pts)
    pts = np.append(pts[pts < t_end], t_end)
    edges = [pts[:1]]
    for a, b in zip(pts[:-1], pts[1:]):
        m = max(1, math.ceil((b - a) / max_step))
        edges.append(np.linspace(a, b, m + 1)[1:])
    edges = np.concatenate(edges)
    return edges, 0.5 * (edges[:-1] + edges[1:])


def sublinearity_profile(field: DynamicConductanceField, n_values, table: HarmonicTable | None = None,
                         max_step: float = 1.0):
    """Rows ``(n, max_{Q(n)} |chi/n|, ||chi/n||_{1,1,Q(n)})``.

    ``Q(n) = [0, n^2] x {-n, ..., n}``; sites outside one period use the
    periodic extension of ``chi``.  The time integral uses the midpoint rule
    on steps of at most ``max_step``; the maximum is taken over step edges
    and midpoints.
    """
    if table is None:
        table = solve(field)
    rows = []
    for n in n_values:
        if int(n) != n or n < 1:
            raise ParameterError("n must be a positive integer")
        n = int(n)
        sites = np.arange(-n, n + 1)
        edges, mids = _time_nodes(table, float(n * n), max_step)
        times = np.concatenate([edges, mids])
        uniq, inv = np.unique(np.mod(times, table.period) if not table.is_static
                              else np.zeros_like(times), return_inverse=True)
        ps = table.psi_at(uniq)[inv]
        chi = -(table.slope - 1.0) * sites[None, :] - (ps[:, sites % table.L] - table.psi00)
        a = np.abs(chi) / n
        linf = float(a.max())
        mid_a = a[len(edges):]
        durations = np.diff(edges)
        l1 = float((durations @ mid_a.mean(axis=1)) / (n * n)) if n * n > 0 else 0.0
        rows.append((n, linf, l1))
    return rows
