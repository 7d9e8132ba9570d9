"""Conductance environments on the one-dimensional lattice.

A field assigns a positive weight to every nearest-neighbour bond
``{x, x+1}`` at every time.  Weights are piecewise constant in time,
``L``-periodic in space and ``T``-periodic in time (``T = inf`` for static
fields).  Internally a field is stored on the union grid of all change
points: ``starts[k]`` is the left end of time slab ``k`` and
``values[k, j]`` the weight of edge ``{j, j+1}`` on that slab.

Bond ``{x, x+1}`` is addressed by its left site ``x``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np

from .errors import ParameterError

FORMAT_TAG = "dynrcm.field/1"

MODEL_KINDS = (
    "constant",
    "static-iid",
    "static-deterministic-periodic",
    "markov-switching",
    "time-periodic-deterministic",
)


@dataclass(frozen=True)
class Edge:
    """The unordered bond ``{left_site, left_site + 1}``."""

    left_site: int

    @classmethod
    def between(cls, x: int, y: int) -> "Edge":
        if abs(x - y) != 1:
            raise ParameterError(f"sites {x} and {y} are not neighbours")
        return cls(min(x, y))


@dataclass(frozen=True)
class Marginal:
    """One-site law of an edge weight.

    kind is one of ``point`` (``value``), ``uniform`` (``low``, ``high``),
    ``two_point`` (``low``, ``high``, ``prob_low``) or ``pareto``
    (``alpha``, ``scale``, ``side``).  For ``side="omega"`` the weight
    itself has tail ``P(w > s) = (s/scale)^-alpha``, so ``E[w^p] < inf``
    iff ``p < alpha``; ``side="inverse"`` puts that tail on ``1/w``.
    """

    kind: str = "point"
    value: float = 1.0
    low: float = 1.0
    high: float = 2.0
    prob_low: float = 0.5
    alpha: float = 2.0
    scale: float = 1.0
    side: str = "omega"

    def validate(self) -> None:
        if self.kind == "point":
            _check_positive("value", self.value)
        elif self.kind in ("uniform", "two_point"):
            _check_positive("low", self.low)
            _check_positive("high", self.high)
            if self.kind == "uniform" and not self.low < self.high:
                raise ParameterError("uniform marginal needs low < high")
            if self.kind == "two_point" and not 0.0 <= self.prob_low <= 1.0:
                raise ParameterError("prob_low must lie in [0, 1]")
        elif self.kind == "pareto":
            _check_positive("alpha", self.alpha)
            _check_positive("scale", self.scale)
            if self.side not in ("omega", "inverse"):
                raise ParameterError(f"unknown pareto side {self.side!r}")
        else:
            raise ParameterError(f"unknown marginal kind {self.kind!r}")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "point":
            return np.full(size, float(self.value))
        if self.kind == "uniform":
            return rng.uniform(self.low, self.high, size)
        if self.kind == "two_point":
            pick_low = rng.random(size) < self.prob_low
            return np.where(pick_low, float(self.low), float(self.high))
        # pareto: inverse transform, U in (0, 1]
        u = 1.0 - rng.random(size)
        w = self.scale * u ** (-1.0 / self.alpha)
        return w if self.side == "omega" else 1.0 / w

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class EnvironmentModel:
    """Recipe for a random or deterministic environment.

    ``pattern`` is used by ``static-deterministic-periodic`` (weights tiled
    along the ring); ``slab_durations`` / ``slab_patterns`` describe the
    time slabs of ``time-periodic-deterministic``.
    """

    kind: str
    marginal: Marginal = dc_field(default_factory=Marginal)
    switch_rate: float = 0.0
    pattern: tuple[float, ...] = ()
    slab_durations: tuple[float, ...] = ()
    slab_patterns: tuple[tuple[float, ...], ...] = ()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "marginal": self.marginal.to_dict(),
            "switch_rate": self.switch_rate,
            "pattern": list(self.pattern),
            "slab_durations": list(self.slab_durations),
            "slab_patterns": [list(p) for p in self.slab_patterns],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentModel":
        return cls(
            kind=d["kind"],
            marginal=Marginal(**d.get("marginal", {})),
            switch_rate=float(d.get("switch_rate", 0.0)),
            pattern=tuple(float(v) for v in d.get("pattern", ())),
            slab_durations=tuple(float(v) for v in d.get("slab_durations", ())),
            slab_patterns=tuple(
                tuple(float(v) for v in p) for p in d.get("slab_patterns", ())
            ),
        )


def _check_positive(name, value):
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
        raise ParameterError(f"{name} must be a positive finite number, got {value!r}")


class DynamicConductanceField:
    """Immutable, space- and time-periodic piecewise-constant conductances."""

    def __init__(
        self,
        starts,
        values,
        period: float = math.inf,
        seed: int | None = None,
        model: EnvironmentModel | None = None,
        time_offset: float = 0.0,
        space_offset: int = 0,
    ):
        starts = np.array(starts, dtype=float)
        values = np.array(values, dtype=float)
        if values.ndim != 2 or values.shape[0] != starts.shape[0]:
            raise ParameterError("values must have shape (n_slabs, L)")
        if values.shape[1] < 2:
            raise ParameterError("space period must be at least 2")
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise ParameterError("conductances must be positive and finite")
        if starts[0] != 0.0 or np.any(np.diff(starts) <= 0):
            raise ParameterError("slab starts must begin at 0 and increase")
        if math.isinf(period):
            if starts.shape[0] != 1:
                raise ParameterError("a static field has exactly one slab")
        elif not period > starts[-1]:
            raise ParameterError("time period must exceed the last slab start")
        starts.setflags(write=False)
        values.setflags(write=False)
        self._starts = starts
        self._values = values
        self.period = float(period)
        self.seed = seed
        self.model = model
        self.time_offset = float(time_offset)
        self.space_offset = int(space_offset)

    # -- basic geometry -------------------------------------------------
    @property
    def dimension(self) -> int:
        return 1

    @property
    def space_period(self) -> int:
        return self._values.shape[1]

    L = space_period

    @property
    def time_period(self) -> float:
        return self.period

    @property
    def is_static(self) -> bool:
        return math.isinf(self.period)

    @property
    def is_shifted(self) -> bool:
        return self.time_offset != 0.0 or self.space_offset != 0

    # -- evaluation -----------------------------------------------------
    def _slab_index(self, t):
        if self.is_static:
            return np.zeros(np.shape(t), dtype=np.intp)
        tm = np.mod(np.asarray(t, dtype=float) + self.time_offset, self.period)
        idx = np.searchsorted(self._starts, tm, side="right") - 1
        return np.clip(idx, 0, len(self._starts) - 1)

    def eval(self, t, e):
        """Weight of bond ``{e, e+1}`` at time ``t`` (vectorised, right-continuous)."""
        if isinstance(e, Edge):
            e = e.left_site
        k = self._slab_index(t)
        j = np.mod(np.asarray(e) + self.space_offset, self.L)
        out = self._values[k, j]
        return float(out) if np.ndim(out) == 0 else out

    def omega(self, t, x, y):
        """Symmetric conductance ``w_t(x, y)``; zero for non-neighbours."""
        if abs(x - y) != 1:
            return 0.0
        return self.eval(t, min(x, y))

    def mu(self, t, x):
        """Total jump rate out of ``x``: sum of the two incident weights."""
        x = np.asarray(x)
        return self.eval(t, x) + self.eval(t, x - 1)

    def nu(self, t, x):
        """Sum of reciprocal incident weights at ``x``."""
        x = np.asarray(x)
        return 1.0 / self.eval(t, x) + 1.0 / self.eval(t, x - 1)

    def shift(self, s: float, z: int) -> "DynamicConductanceField":
        """Time-space shift: the result at ``(t, x)`` is this field at ``(t+s, x+z)``."""
        return DynamicConductanceField(
            self._starts,
            self._values,
            self.period,
            self.seed,
            self.model,
            self.time_offset + s,
            self.space_offset + int(z),
        )

    # -- tables -----------------------------------------------------------
    def slabs(self) -> tuple[np.ndarray, np.ndarray]:
        """``(starts, values)`` on one period with any shift folded in."""
        if not self.is_shifted:
            return self._starts, self._values
        values = np.roll(self._values, -self.space_offset, axis=1)
        if self.is_static or self.time_offset == 0.0:
            return self._starts.copy(), values
        T = self.period
        moved = np.mod(self._starts - self.time_offset, T)
        moved[moved >= T] = 0.0
        starts = np.unique(np.concatenate(([0.0], moved)))
        ends = np.append(starts[1:], T)
        # evaluate at slab midpoints so rounding at boundaries cannot pick a neighbour
        mids = 0.5 * (starts + ends)
        k = self._slab_index(mids)
        return starts, values[k]

    def slab_bounds(self) -> np.ndarray:
        """Slab boundaries on one period, ``[s_0=0, s_1, ..., T]``."""
        starts, _ = self.slabs()
        return np.append(starts, self.period)

    def breakpoints(self, t0: float, t1: float) -> np.ndarray:
        """All change times in ``[t0, t1]`` plus the two ends, ascending."""
        if self.is_static or t1 <= t0:
            return np.array([t0, t1], dtype=float)
        starts, _ = self.slabs()
        T = self.period
        k0 = math.floor(t0 / T)
        k1 = math.floor(t1 / T)
        pts = (np.arange(k0, k1 + 1)[:, None] * T + starts[None, :]).ravel()
        pts = pts[(pts > t0) & (pts < t1)]
        return np.concatenate(([t0], pts, [t1]))

    def edge_change_times(self, e: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-edge change table: times in ``[0, T)`` where bond ``e`` jumps and new values."""
        starts, values = self.slabs()
        col = values[:, int(e) % self.L]
        keep = np.concatenate(([True], col[1:] != col[:-1]))
        return starts[keep], col[keep]

    def period_integral(self) -> np.ndarray:
        """``int_0^T w_t(j, j+1) dt`` per edge (static fields: per unit time)."""
        starts, values = self.slabs()
        if self.is_static:
            return values[0].copy()
        durations = np.diff(np.append(starts, self.period))
        return durations @ values

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        starts, values = self.slabs()
        h.update(np.ascontiguousarray(starts).tobytes())
        h.update(np.ascontiguousarray(values).tobytes())
        h.update(repr(self.period).encode())
        return h.hexdigest()

    def same_environment(self, other: "DynamicConductanceField") -> bool:
        return self is other or self.fingerprint() == other.fingerprint()

    def __repr__(self):
        T = "static" if self.is_static else f"T={self.period:g}"
        return (
            f"DynamicConductanceField(L={self.L}, {T}, slabs={len(self._starts)}, "
            f"seed={self.seed}, offset=({self.time_offset:g}, {self.space_offset}))"
        )

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        per_edge = []
        for e in range(self.L):
            times, vals = self.edge_change_times(e)
            per_edge.append({"edge": e, "times": times.tolist(), "values": vals.tolist()})
        return {
            "format": FORMAT_TAG,
            "model": None if self.model is None else self.model.to_dict(),
            "seed": self.seed,
            "space_period": self.L,
            "time_period": None if self.is_static else self.period,
            "time_offset": self.time_offset,
            "space_offset": self.space_offset,
            "slab_starts": self._starts.tolist(),
            "slab_values": self._values.tolist(),
            "edge_changes": per_edge,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicConductanceField":
        if d.get("format") != FORMAT_TAG:
            raise ParameterError(f"not a {FORMAT_TAG} document")
        period = math.inf if d["time_period"] is None else float(d["time_period"])
        model = None if d.get("model") is None else EnvironmentModel.from_dict(d["model"])
        return cls(
            d["slab_starts"],
            d["slab_values"],
            period,
            d.get("seed"),
            model,
            d.get("time_offset", 0.0),
            d.get("space_offset", 0),
        )

    @classmethod
    def loads(cls, text: str) -> "DynamicConductanceField":
        return cls.from_dict(json.loads(text))


def save_field(field: DynamicConductanceField, path) -> None:
    with open(path, "w") as fh:
        fh.write(field.dumps())


def load_field(path) -> DynamicConductanceField:
    with open(path) as fh:
        return DynamicConductanceField.loads(fh.read())


# -- construction -------------------------------------------------------------


def constant_field(L: int, value: float = 1.0) -> DynamicConductanceField:
    return build_environment(
        EnvironmentModel("constant", Marginal("point", value=value)), L, None, 0
    )


def periodic_static_field(pattern: Sequence[float], L: int | None = None):
    L = len(pattern) if L is None else L
    return build_environment(
        EnvironmentModel("static-deterministic-periodic", pattern=tuple(pattern)), L, None, 0
    )


def slab_field(durations: Sequence[float], patterns: Sequence[Sequence[float]], L=None):
    """Deterministic time-periodic field: slab ``k`` lasts ``durations[k]``."""
    L = len(patterns[0]) if L is None else L
    model = EnvironmentModel(
        "time-periodic-deterministic",
        slab_durations=tuple(durations),
        slab_patterns=tuple(tuple(p) for p in patterns),
    )
    return build_environment(model, L, float(sum(durations)), 0)


def _tile(pattern, L):
    if len(pattern) == 0:
        raise ParameterError("empty weight pattern")
    for v in pattern:
        _check_positive("pattern weight", float(v))
    return np.array([pattern[j % len(pattern)] for j in range(L)], dtype=float)


def build_environment(
    model: EnvironmentModel,
    space_period: int,
    time_period: float | None,
    seed: int,
) -> DynamicConductanceField:
    """Realise ``model`` on a ring of ``space_period`` sites.

    Static kinds ignore ``time_period``; dynamic kinds need a finite
    positive one.  The same arguments always give the same field.
    """
    if model.kind not in MODEL_KINDS:
        raise ParameterError(f"unknown environment kind {model.kind!r}")
    if not isinstance(space_period, (int, np.integer)) or space_period < 2:
        raise ParameterError("space_period must be an integer >= 2")
    L = int(space_period)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))

    if model.kind == "constant":
        if model.marginal.kind != "point":
            raise ParameterError("constant environments need a point-mass marginal")
        model.marginal.validate()
        values = np.full((1, L), float(model.marginal.value))
        return DynamicConductanceField([0.0], values, math.inf, seed, model)

    if model.kind == "static-iid":
        model.marginal.validate()
        values = model.marginal.sample(rng, L)[None, :]
        return DynamicConductanceField([0.0], values, math.inf, seed, model)

    if model.kind == "static-deterministic-periodic":
        values = _tile(model.pattern, L)[None, :]
        return DynamicConductanceField([0.0], values, math.inf, seed, model)

    if model.kind == "time-periodic-deterministic":
        durs = np.array(model.slab_durations, dtype=float)
        if len(durs) == 0 or len(durs) != len(model.slab_patterns):
            raise ParameterError("need one pattern per slab duration")
        if np.any(~np.isfinite(durs)) or np.any(durs <= 0):
            raise ParameterError("slab durations must be positive")
        T = float(durs.sum())
        if time_period is not None and not math.isclose(T, time_period, rel_tol=1e-12):
            raise ParameterError(f"slab durations sum to {T}, not time_period={time_period}")
        starts = np.concatenate(([0.0], np.cumsum(durs)[:-1]))
        values = np.stack([_tile(p, L) for p in model.slab_patterns])
        return DynamicConductanceField(starts, values, T, seed, model)

    # markov-switching
    model.marginal.validate()
    if time_period is None or not (math.isfinite(time_period) and time_period > 0):
        raise ParameterError("markov-switching needs a finite time_period > 0")
    if not (math.isfinite(model.switch_rate) and model.switch_rate >= 0):
        raise ParameterError("switch_rate must be >= 0")
    T = float(time_period)
    edge_times, edge_vals = [], []
    for _ in range(L):
        times = [0.0]
        if model.switch_rate > 0:
            t = rng.exponential(1.0 / model.switch_rate)
            while t < T:
                times.append(t)
                t += rng.exponential(1.0 / model.switch_rate)
        edge_times.append(np.array(times))
        edge_vals.append(model.marginal.sample(rng, len(times)))
    starts = np.unique(np.concatenate(edge_times))
    values = np.empty((len(starts), L))
    for j in range(L):
        pos = np.searchsorted(edge_times[j], starts, side="right") - 1
        values[:, j] = edge_vals[j][pos]
    return DynamicConductanceField(starts, values, T, seed, model)
