import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynrcm import norms
from dynrcm.corrector import solve
from dynrcm.env import EnvironmentModel, Marginal, build_environment, constant_field, periodic_static_field, slab_field
from dynrcm.errors import ParameterError
from dynrcm.norms import INF, SpaceTimeBox, box_Q, st_norm

exponents = st.one_of(st.floats(1.0, 12.0), st.just(INF))


def test_box_Q_examples():
    b = box_Q(1)
    assert (b.t0, b.t1) == (0.0, 1.0) and list(b.sites) == [-1, 0, 1]
    b = box_Q(2)
    assert b.duration == 4 and list(b.sites) == [-2, -1, 0, 1, 2]
    b = box_Q(10)
    assert b.n_sites == 21 and b.duration == 100
    with pytest.raises(ParameterError):
        box_Q(0)


def test_box_invariants():
    with pytest.raises(ParameterError):
        SpaceTimeBox(1.0, 1.0, 0, 2)
    with pytest.raises(ParameterError):
        SpaceTimeBox(0.0, 1.0, 3, 2)


def test_st_norm_direct_evaluation():
    box = SpaceTimeBox(0.0, 3.0, 0, 1)
    u = np.array([1.0, 3.0])
    assert st_norm(u, (2, 1), box) == pytest.approx(math.sqrt(5), rel=1e-14)
    assert st_norm(u, (INF, 1), box) == 3.0
    assert st_norm(u, norms.NormSpec(1, INF), box) == 2.0


@settings(max_examples=100, deadline=None)
@given(c=st.floats(0.0, 1e3), p=exponents, q=exponents)
def test_st_norm_of_constant(c, p, q):
    box = SpaceTimeBox(0.5, 4.0, -3, 2)
    assert st_norm(lambda t, x: np.full(len(x), c), (p, q), box) == pytest.approx(c, rel=1e-12, abs=0)


def test_st_norm_time_integral_piecewise_exact():
    box = SpaceTimeBox(0.0, 3.0, 0, 0)
    u = lambda t, x: np.full(len(x), 1.0 if t < 1 else 2.0)
    # (1/3)(1 * 1 + 2 * 4) = 3
    assert st_norm(u, (1, 2), box, breakpoints=[1.0]) == pytest.approx(math.sqrt(3), rel=1e-14)
    assert st_norm(u, (1, INF), box, breakpoints=[1.0]) == 2.0


def test_st_norm_midpoint_rule_for_smooth_integrand():
    box = SpaceTimeBox(0.0, 10.0, 0, 0)
    val = st_norm(lambda t, x: np.full(len(x), t), (1, 1), box, max_step=0.01)
    assert val == pytest.approx(5.0, rel=1e-12)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 10**6), p1=st.floats(1.0, 8.0), dp=st.floats(0.0, 8.0), q=exponents)
def test_st_norm_monotone_in_p(seed, p1, dp, q):
    rng = np.random.default_rng(seed)
    vals = rng.exponential(size=(3, 7))
    cuts = [1.0, 2.5]
    box = SpaceTimeBox(0.0, 4.0, -3, 3)
    u = lambda t, x: vals[int(np.searchsorted(cuts, t, side="right"))]
    a = st_norm(u, (p1, q), box, breakpoints=cuts)
    b = st_norm(u, (p1 + dp, q), box, breakpoints=cuts)
    assert a <= b + 1e-12
    assert a <= st_norm(u, (INF, q), box, breakpoints=cuts) + 1e-12


def test_dirichlet_energy_examples():
    c = constant_field(6)
    sites = np.array([-1, 0, 1])
    assert norms.dirichlet_energy(c, 0.0, np.zeros(3), sites) == 0.0
    assert norms.dirichlet_energy(c, 0.0, np.array([0.0, 1.0, 0.0]), sites) == 2.0
    # w(-1, 0) = 3 and w(0, 1) = 2
    f = periodic_static_field([2.0, 3.0])
    assert norms.dirichlet_energy(f, 0.0, np.array([1.0]), np.array([0])) == 5.0


def test_dirichlet_energy_boundary_edges_count():
    # support on the box edge still sees the bond leaving the box
    c = constant_field(4)
    assert norms.dirichlet_energy(c, 0.0, np.array([1.0, 1.0]), np.array([0, 1])) == 2.0


def test_dirichlet_unsquared_reading_telescopes():
    c = constant_field(4)
    f = np.array([0.5, 2.0, -1.0])
    assert norms.dirichlet_energy(c, 0.0, f, np.arange(3), squared=False) == pytest.approx(0.0, abs=1e-15)


def test_sobolev_examples():
    c = constant_field(8)
    box = SpaceTimeBox(0.0, 1.0, -1, 1)
    assert norms.sobolev_check(c, lambda t, x: np.zeros(len(x)), box, 1.0) == (0.0, 0.0, True)
    r = norms.sobolev_check(c, lambda t, x: (np.asarray(x) == 0) * 1.0, box, 1.0)
    assert r.lhs == pytest.approx(1.0) and r.rhs == pytest.approx(12.0) and r.holds


def test_sobolev_randomized_instances():
    violations = [i for i, inst in enumerate(norms.random_sobolev_instances(300, seed=17))
                  if not norms.sobolev_check(inst.field, inst.u, inst.box, inst.q_prime, inst.breakpoints).holds]
    assert violations == []


def test_sobolev_rejects_small_q_prime():
    with pytest.raises(ParameterError):
        norms.sobolev_check(constant_field(4), np.zeros(3), SpaceTimeBox(0, 1, -1, 1), 0.5)


def test_condition_1d_examples():
    assert norms.condition_1d(4, 1)
    assert not norms.condition_1d(3, 1)
    assert not norms.condition_1d(2, 2)
    assert not norms.condition_1d(1, 100)
    assert norms.condition_1d(INF, 1)
    assert all(norms.condition_1d(p, 1) for p in np.linspace(3.001, 50, 200))


@settings(max_examples=300, deadline=None)
@given(p=st.floats(1.0, 20.0), q=st.floats(1.0, 20.0), dp=st.floats(0, 5), dq=st.floats(0, 5))
def test_condition_1d_monotone(p, q, dp, dq):
    if norms.condition_1d(p, q):
        assert norms.condition_1d(p + dp, q) and norms.condition_1d(p, q + dq)


def test_condition_d_examples():
    assert norms.condition_d(10, 10, 2)
    assert not norms.condition_d(2, 2, 2)
    with pytest.raises(ParameterError):
        norms.condition_d(4, 1, 1)


def test_condition_d_agrees_with_1d_at_q1():
    rng = np.random.default_rng(5)
    for p in rng.uniform(1.01, 12.0, 100):
        assert norms.condition_d(p, 1, 1, allow_low_dimension=True) == norms.condition_1d(p, 1)


def test_condition_int_examples():
    assert norms.condition_int(1.5, INF, INF) and not norms.condition_int(1.0, INF, INF)
    assert not norms.condition_int(4, 2, 1)
    assert norms.condition_int(8, 2, 1)
    assert not norms.condition_int(100, 1, 1)  # p' = 1 makes the space factor infinite
    assert norms.condition_int(8, 2, 1, q=4, d=2) == (0.5 + 0.25 < 1.0)
    with pytest.raises(ParameterError):
        norms.condition_int(4, 2, 1, d=2)


def test_condition_grid_csv():
    rows = norms.condition_grid([1.1, 4.0], [1.0, 6.0])
    buf = io.StringIO()
    norms.write_condition_grid(rows, buf)
    assert buf.getvalue().splitlines() == ["p,q,satisfied", "1.1,1.0,0", "1.1,6.0,0", "4.0,1.0,1", "4.0,6.0,1"]


def test_q_threshold_matches_condition():
    for p in (2.5, 3.0, 4.0):
        q = norms.q_threshold(p)
        assert not norms.condition_1d(p, q) and norms.condition_1d(p, q * 1.01)


def test_cutoff_shape():
    eta = norms.cutoff(8, 0.5)
    x = np.arange(-9, 10)
    v = eta(x)
    assert np.all(v[np.abs(x) <= 4] == 1) and np.all(v[np.abs(x) >= 8] == 0)
    assert np.max(np.abs(np.diff(v))) <= 1 / 4 + 1e-15


def test_energy_quantities_trivial_cases():
    c = constant_field(8)
    zero = norms.energy_quantities(c, lambda t, x: np.zeros(len(x)), 4, 0.5, 1.0, (2.0, 2.0, 2.0))
    assert zero.sup_term == zero.dirichlet_term == zero.rhs_bound == zero.implied_constant == 0.0
    assert zero.interpolation_lhs == zero.interpolation_rhs == 0.0
    one = norms.energy_quantities(c, lambda t, x: np.ones(len(x)), 4, 0.5, 1.0, (2.0, 2.0, 2.0))
    assert one.sup_term == pytest.approx(1.0)
    assert math.isfinite(one.implied_constant) and one.implied_constant > 0
    assert one.interpolation_lhs <= one.interpolation_rhs


def test_energy_implied_constants_stable_for_corrector():
    m = EnvironmentModel("markov-switching", Marginal("uniform", low=0.5, high=4.0), switch_rate=0.5)
    consts = []
    for n in (4, 8, 16):
        f = build_environment(m, 2 * n, float(n * n), 3)
        r = norms.energy_quantities(f, norms.corrector_function(solve(f), n), n, 0.5, 1.0, (4.0, 4.0, 4.0))
        consts.append(r.implied_constant)
    assert all(c > 0 for c in consts)
    assert max(consts) / min(consts) < 4


def test_energy_argument_checks():
    c = constant_field(4)
    u = lambda t, x: np.ones(len(x))
    with pytest.raises(ParameterError):
        norms.energy_quantities(c, u, 4, 1.0, 1.0, (2, 2, 2))
    with pytest.raises(ParameterError):
        norms.energy_quantities(c, u, 4, 0.5, 0.5, (2, 2, 2))


def test_conjugate():
    assert norms.conjugate(2.0) == 2.0
    assert norms.conjugate(1.0) == INF and norms.conjugate(INF) == 1.0


def test_slab_field_nu_norm_exact():
    f = slab_field([1.0, 1.0], [[1.0, 1.0], [2.0, 2.0]])
    box = SpaceTimeBox(0.0, 2.0, 0, 3)
    # nu = 2 then 1; (1/2)(2 + 1) = 1.5
    assert st_norm(norms.nu_function(f), (1, 1), box, breakpoints=f.breakpoints(0, 2)) == pytest.approx(1.5)
