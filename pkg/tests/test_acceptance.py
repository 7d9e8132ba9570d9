"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v -s``; the summary
lines are repeated at the end of the pytest report.  Monte Carlo seeds are
fixed, so every number below is reproducible bit for bit.
"""

import math
import time

import numpy as np
import pytest

from dynrcm import norms, stats
from dynrcm.cli import main
from dynrcm.corrector import generator_residual, pde_residual, solve, sublinearity_profile, variance_formula
from dynrcm.env import EnvironmentModel, Marginal, build_environment, constant_field, periodic_static_field, slab_field

SUITE_START = time.perf_counter()

WALKERS = 20000            # stderr of Var(X_t)/t is about sqrt(2 / WALKERS) = 1%
LONG_T = 1e4
KS_N, KS_M = 30, 5000
GRID = [float(t) for t in range(1, 21)]
LAGS = [1.0, 10.0]


def static_rings():
    model = EnvironmentModel("static-iid", Marginal("uniform", low=0.5, high=4.0))
    return [build_environment(model, L, None, seed) for seed, L in enumerate((8, 16, 8, 16, 8), start=101)]


def two_slab_fields():
    rng = np.random.default_rng(7)
    out = []
    for L in (8, 8, 12):
        durations = rng.uniform(0.5, 2.0, 2)
        patterns = rng.uniform(0.5, 4.0, (2, L))
        out.append(slab_field(durations, patterns))
    return out


def long_ensemble(field, seed):
    times = GRID + [float(KS_N**2), LONG_T]
    return stats.sample_ensemble(field, times, WALKERS, seed=seed)


@pytest.fixture(scope="module")
def rings():
    return [(f, solve(f), long_ensemble(f, 1000 + i)) for i, f in enumerate(static_rings())]


@pytest.fixture(scope="module")
def slabs():
    return [(f, solve(f), long_ensemble(f, 2000 + i)) for i, f in enumerate(two_slab_fields())]


def test_criterion_1_constant_oracle(criterion):
    t0 = time.perf_counter()
    ens = stats.sample_ensemble(constant_field(8), [100.0], 10**5, seed=1)
    s2, se = stats.estimate_sigma2(ens, 100.0)
    elapsed = time.perf_counter() - t0
    ok = abs(s2 / 2.0 - 1) <= 0.02 and elapsed < 60
    criterion(1, ok, f"sigma2={s2:.4f}+-{se:.4f} (target 2, tol 2%), {elapsed:.1f}s")
    assert ok


def test_criterion_2_static_homogenization(criterion, rings):
    parts, ok = [], True
    for f, table, ens in rings:
        w = f.slabs()[1][0]
        oracle = 2 * f.L / np.sum(1 / w)
        s2, se = stats.estimate_sigma2(ens, LONG_T)
        res = generator_residual(table)
        good = (abs(s2 / oracle - 1) <= 0.03 and res < 1e-10
                and variance_formula(table) == pytest.approx(oracle, rel=1e-12))
        ok &= good
        parts.append(f"L={f.L}: mc/oracle={s2 / oracle:.4f} res={res:.1e}")
    criterion(2, ok, "; ".join(parts))
    assert ok


def test_criterion_3_dynamic_cross_validation(criterion, slabs):
    parts, ok = [], True
    for f, table, ens in slabs:
        formula = variance_formula(table)
        s2, _ = stats.estimate_sigma2(ens, LONG_T)
        _, _, qv_ratio = stats.qv_match(ens, table, LONG_T)
        res = pde_residual(table)
        good = abs(s2 / formula - 1) <= 0.03 and abs(qv_ratio - 1) <= 0.03 and res < 1e-9
        ok &= good
        parts.append(f"formula={formula:.4f} mc/formula={s2 / formula:.4f} qv={qv_ratio:.4f} res={res:.1e}")
    criterion(3, ok, "; ".join(parts))
    assert ok


def test_criterion_4_martingale_suite(criterion, rings, slabs):
    worst, ok = 0.0, True
    fields = [(constant_field(4), solve(constant_field(4)))] + [(f, t) for f, t, _ in rings + slabs]
    for i, (f, table) in enumerate(fields):
        # dedicated short ensembles: only the grid up to t = 20 is needed
        ens = stats.sample_ensemble(f, GRID, WALKERS, seed=3000 + i)
        for _, mean, se in stats.martingale_residual(ens, table, LAGS):
            worst = max(worst, abs(mean) / se)
            ok &= abs(mean) <= 3 * se
    two_phase = periodic_static_field([1.0] * 16 + [4.0] * 16)
    ens = stats.sample_ensemble(two_phase, GRID, WALKERS, seed=3100)
    (_, mean, se), = stats.martingale_residual(ens, solve(two_phase).with_slope(1.1), [1.0],
                                               window_starts=[0.0, 1.0, 2.0, 3.0, 4.0])
    control = abs(mean) / se
    ok &= control > 5
    criterion(4, ok, f"{len(fields)} fields x {len(LAGS)} lags, worst |z|={worst:.2f} (<=3); "
                     f"slope-1.1 control |z|={control:.1f} (>5)")
    assert ok


def test_criterion_5_ks_proxy(criterion, rings, slabs):
    c = constant_field(4)
    cases = [("constant", c, solve(c), stats.sample_ensemble(c, [float(KS_N**2)], KS_M, seed=4000)),
             ("static-random", *rings[0]), ("two-slab", *slabs[0])]
    parts, ok = [], True
    for name, f, table, ens in cases:
        raw = ens.at(float(KS_N**2))[:KS_M] / KS_N
        sigma2 = variance_formula(table)
        D_raw = stats.ks_statistic(raw, sigma2)
        D, thr, good = stats.ks_gaussian(stats.lattice_jitter(raw, 1.0 / KS_N, seed=4100), sigma2)
        ok &= good
        parts.append(f"{name}: D={D:.4f} (raw {D_raw:.4f}) thr={thr:.4f}")
    rate = stats.ks_rejection_rate(10**4, 1000, seed=4200)
    ok &= abs(rate - 0.05) <= 0.015
    criterion(5, ok, "; ".join(parts) + f"; self-test rejection={rate:.3f}")
    assert ok


def test_criterion_6_sublinearity(criterion):
    zeros = sublinearity_profile(constant_field(6), [2, 4, 8])
    alt = sublinearity_profile(periodic_static_field([1.0, 2.0]), [2])[0]
    model = EnvironmentModel("markov-switching", Marginal("uniform", low=0.5, high=4.0), switch_rate=0.5)
    rows = [sublinearity_profile(build_environment(model, 2 * n, float(n * n), 1), [n])[0]
            for n in (4, 8, 16, 32)]
    logn = np.log([r[0] for r in rows])
    s_inf = np.polyfit(logn, np.log([r[1] for r in rows]), 1)[0]
    s_1 = np.polyfit(logn, np.log([r[2] for r in rows]), 1)[0]
    ok = (all(r[1] < 1e-12 and r[2] < 1e-12 for r in zeros)
          and math.isclose(alt[1], 1 / 6, rel_tol=1e-12) and s_inf < 0 and s_1 < 0)
    criterion(6, ok, f"constant max={max(r[1] for r in zeros):.1e}; alternating n=2 linf={alt[1]:.12f}; "
                     f"slopes linf={s_inf:.3f} l1={s_1:.3f}")
    assert ok


def test_criterion_7_sobolev(criterion):
    bad = [i for i, inst in enumerate(norms.random_sobolev_instances(1000, seed=7000))
           if not norms.sobolev_check(inst.field, inst.u, inst.box, inst.q_prime, inst.breakpoints).holds]
    delta = norms.sobolev_check(constant_field(8), lambda t, x: (np.asarray(x) == 0) * 1.0,
                                norms.SpaceTimeBox(0.0, 1.0, -1, 1), 1.0)
    ok = not bad and math.isclose(delta.lhs, 1.0) and math.isclose(delta.rhs, 12.0)
    criterion(7, ok, f"violations={len(bad)}/1000; delta example=({delta.lhs:g}, {delta.rhs:g})")
    assert ok


def test_criterion_8_conditions(criterion, tmp_path):
    facts = (norms.condition_1d(4, 1) and not norms.condition_1d(3, 1)
             and all(norms.condition_1d(p, 1) for p in np.linspace(3 + 1e-9, 60, 500)))
    rng = np.random.default_rng(8)
    agree = all(norms.condition_d(p, 1, 1, allow_low_dimension=True) == norms.condition_1d(p, 1)
                for p in rng.uniform(1.0, 12.0, 100))
    static = all(norms.condition_int(p, math.inf, math.inf) == (p > 1) for p in np.linspace(1.0, 6.0, 101))
    (tmp_path / "c.toml").write_text('experiment = "check-conditions"\n')
    status = main(["--config", str(tmp_path / "c.toml"), "--out", str(tmp_path / "out")])
    lines = (tmp_path / "out" / "conditions.csv").read_text().splitlines()
    grid_ok = status == 0 and lines[0] == "p,q,satisfied" and len(lines) == 1 + 50 * 50
    ok = facts and agree and static and grid_ok
    criterion(8, ok, f"facts={facts} d1-agreement={agree} static p>1={static} grid rows={len(lines) - 1}")
    assert ok


REPRO_CONFIGS = {
    "verify-qip": """experiment = "verify-qip"
[environment]
kind = "time-periodic-deterministic"
slab_durations = [1.0, 0.5]
slab_patterns = [[1.0, 2.0, 3.0, 0.5], [2.0, 0.7]]
[sizes]
L = 8
walkers = 5000
horizon = 400.0
n = [10, 20]
[tolerances]
sigma2_rel = 0.05
qv_rel = 0.05
""",
    "simulate": """experiment = "simulate"
[environment]
kind = "markov-switching"
marginal = { kind = "pareto", alpha = 0.8, scale = 1.0, side = "inverse" }
switch_rate = 2.0
[sizes]
L = 10
T = 6.0
walkers = 2000
horizon = 50.0
""",
    "corrector": 'experiment = "corrector"\n[environment]\nkind = "static-iid"\n'
                 'marginal = { kind = "uniform", low = 0.5, high = 4.0 }\n[sizes]\nL = 16\n',
    "sublinearity": 'experiment = "sublinearity"\n[environment]\nkind = "markov-switching"\n'
                    'marginal = { kind = "uniform", low = 0.5, high = 4.0 }\nswitch_rate = 0.5\n'
                    '[sizes]\nL_per_n = 2\nT_per_n2 = 1.0\nn = [4, 8]\n',
    "check-conditions": 'experiment = "check-conditions"\n',
    "sobolev-test": 'experiment = "sobolev-test"\n[sobolev]\ninstances = 200\n',
}


def test_criterion_9_reproducibility(criterion, tmp_path):
    identical = True
    for name, text in REPRO_CONFIGS.items():
        cfg = tmp_path / f"{name}.toml"
        cfg.write_text(text)
        outs = [tmp_path / name / run for run in ("a", "b")]
        for out in outs:
            assert main(["--config", str(cfg), "--out", str(out)]) in (0, 1)
        files = sorted(p.name for p in outs[0].iterdir() if p.suffix == ".csv")
        assert files
        identical &= all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
    elapsed = time.perf_counter() - SUITE_START
    ok = identical and elapsed < 15 * 60
    criterion(9, ok, f"{len(REPRO_CONFIGS)} configs rerun byte-identical={identical}; "
                     f"suite wall time {elapsed:.0f}s (limit 900s)")
    assert ok
