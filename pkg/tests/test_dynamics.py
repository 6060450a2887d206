import csv
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterlag.diagnostics import oracle_equilibrium
from clusterlag.dynamics import (AlgorithmState, CentralizedSystem, DistributedSystem, DivergenceError,
                                 LayoutError, StateLayout, StopCriterion, TopologySchedule, build_layouts,
                                 centralized_rhs, communication_counts, distributed_rhs,
                                 distributed_rhs_nodewise, init_state, integrate, reindex, rk4_step,
                                 stable_epsilon, suggest_step, write_trajectory_csv)
from clusterlag.model import GainConfig
from clusterlag.oracle import KKTPoint, solve_boxed_qp, solve_equality_qp
from clusterlag.penalty import PenaltyConfig
from clusterlag.scenarios import appendix_b, example1, example2, random_quadratic


def random_state(prob, layouts, rng, scale=3.0):
    s = init_state(prob, layouts)
    vec = rng.normal(scale=scale, size=s.vec.shape)
    for k in range(prob.p):
        sl = s.layout.y_slice(k)
        vec[sl] -= vec[sl].mean()
    return AlgorithmState(0.0, vec, s.layout)


def test_init_state_defaults_and_checks():
    prob = example1()
    lays = build_layouts(prob)
    s = init_state(prob, lays)
    assert not s.vec.any() and s.t == 0.0
    assert s.vec.size == 2 * (4 + 4) + 12
    with pytest.raises(ValueError, match="sum to zero"):
        init_state(prob, lays, y0=[[1, 0, 0, 0], [0, 0, 0, 0]])
    s = init_state(prob, lays, v0=[[1, 2, 3, 4], [5, 6, 7, 8]])
    np.testing.assert_array_equal(s.v(1), [5, 6, 7, 8])
    with pytest.raises(ValueError, match="entries"):
        init_state(prob, lays, x0=np.zeros(3))


def test_dispatch_layouts_and_counts():
    prob = example1()
    lays = build_layouts(prob)
    assert [l.nodes for l in lays] == [(1, 2, 3, 4), (3, 4, 5, 6)]
    assert communication_counts(prob, lays) == {1: 1, 2: 1, 3: 2, 4: 2, 5: 1, 6: 1}
    assert sum(lays[1].bbar.values()) == 700.0 and lays[1].bbar[4] == 0.0


def test_sensor_layout_counts():
    prob = example2()
    lays = build_layouts(prob)
    assert [l.nodes for l in lays] == [(1, 2), (2, 3), (3, 4), (4, 5)]
    assert list(communication_counts(prob, lays).values()) == [1, 2, 2, 2, 1]
    full = build_layouts(prob, full_graph=True)
    assert list(communication_counts(prob, full).values()) == [4, 4, 4, 4, 4]


def test_layout_overrides():
    prob = example1()
    lays = build_layouts(prob, clusters={1: [3, 4, 5, 6]}, edges={0: [(1, 2), (2, 3), (3, 4)]})
    assert lays[0].adjacency[0, 3] == 0
    with pytest.raises(LayoutError, match="physical graph"):
        build_layouts(prob, edges={0: [(1, 3), (1, 2), (3, 4)]})
    with pytest.raises(LayoutError, match="core"):
        build_layouts(prob, clusters={1: [3, 4, 5]})


@settings(max_examples=30)
@given(st.integers(0, 10**6))
def test_equilibrium_is_fixed_point(seed):
    prob = random_quadratic(seed, boxed=False)
    lays = build_layouts(prob)
    x, nu = solve_equality_qp(prob)
    eq = oracle_equilibrium(prob, lays, KKTPoint(x, nu, np.zeros(prob.m), np.zeros(prob.m)))
    gains = GainConfig.uniform(prob, rho=float(np.random.default_rng(seed).uniform(0, 3)))
    scale = 1 + np.abs(eq.vec).max()
    assert np.abs(distributed_rhs(eq, prob, lays, gains)).max() <= 1e-10 * scale


@settings(max_examples=30)
@given(st.integers(0, 10**6), st.booleans())
def test_cluster_sums(seed, penalized):
    rng = np.random.default_rng(seed)
    prob = random_quadratic(seed)
    lays = build_layouts(prob)
    s = random_state(prob, lays, rng)
    sys_ = DistributedSystem(prob, lays, GainConfig.uniform(prob), penalized,
                             PenaltyConfig(0.1, 10.0))
    d = sys_(0.0, s.vec)
    x = s.x
    for k in range(prob.p):
        dy = d[s.layout.y_slice(k)]
        dv = d[s.layout.v_slice(k)]
        scale = 1 + np.abs(s.vec).max()
        # exact in real arithmetic; only summation rounding remains
        assert abs(math.fsum(dy)) <= 1e-13 * scale * len(dy)
        assert abs(math.fsum(dv) - (prob.W[k] @ x - prob.b[k])) <= 1e-12 * scale * len(dv)


@settings(max_examples=40)
@given(st.integers(0, 10**6), st.booleans(), st.floats(0, 3))
def test_nodewise_matches_matrix_form(seed, penalized, rho):
    rng = np.random.default_rng(seed)
    prob = random_quadratic(seed)
    lays = build_layouts(prob, beta=float(rng.uniform(0.2, 3)))
    s = random_state(prob, lays, rng)
    gains = GainConfig.uniform(prob, rho=rho, beta=lays[0].beta)
    cfg = PenaltyConfig(0.05, 7.0)
    a = distributed_rhs(s, prob, lays, gains, penalized, cfg)
    b = distributed_rhs_nodewise(s, prob, lays, gains, penalized, cfg)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-11)


def test_nodewise_matches_on_flat_costs():
    prob = appendix_b()
    lays = build_layouts(prob)
    s = random_state(prob, lays, np.random.default_rng(1))
    gains = GainConfig.uniform(prob)
    np.testing.assert_allclose(distributed_rhs(s, prob, lays, gains),
                               distributed_rhs_nodewise(s, prob, lays, gains), atol=1e-12)


def test_locality():
    prob = example1()
    lays = build_layouts(prob)
    gains = GainConfig.uniform(prob)
    rng = np.random.default_rng(5)
    s = random_state(prob, lays, rng)
    base = distributed_rhs(s, prob, lays, gains)
    sl = s.layout
    for k, lay in enumerate(lays):
        for a, l in enumerate(lay.nodes):
            vec = s.vec.copy()
            for b, j in enumerate(lay.nodes):
                if j != l and lay.adjacency[a, b] == 0:
                    vec[sl.v_slice(k).start + b] = 0.0
            d = distributed_rhs(AlgorithmState(0.0, vec, sl), prob, lays, gains)
            assert d[sl.y_slice(k).start + a] == base[sl.y_slice(k).start + a]
            assert d[sl.v_slice(k).start + a] == base[sl.v_slice(k).start + a]
    # an agent's x derivative ignores every other agent's state
    for agent in prob.agents:
        xs = prob.slice_of(agent.id)
        vec = s.vec.copy()
        for k, lay in enumerate(lays):
            for a, l in enumerate(lay.nodes):
                if l != agent.id:
                    vec[sl.y_slice(k).start + a] = 0.0
                    vec[sl.v_slice(k).start + a] = 0.0
        other = np.ones(prob.m, dtype=bool)
        other[xs] = False
        vec[sl.x_slice.start:][other] = 0.0
        d = distributed_rhs(AlgorithmState(0.0, vec, sl), prob, lays, gains)
        np.testing.assert_array_equal(d[sl.x_slice][xs], base[sl.x_slice][xs])


def test_helper_gets_no_x_coupling():
    prob = example1()
    lays = build_layouts(prob)
    sys_ = DistributedSystem(prob, lays, GainConfig.uniform(prob))
    helper_row = lays[0].size + lays[1].slot(4)
    assert not sys_.Psi[helper_row].any()


def test_centralized_rhs_at_kkt_and_hand_expansion():
    prob = random_quadratic(11, boxed=False)
    x, nu = solve_equality_qp(prob)
    dnu, dx = centralized_rhs(nu, x, prob, rho=2.0)
    assert np.abs(dnu).max() < 1e-10 and np.abs(dx).max() < 1e-10
    # two agents, f = a1 x1^2 + a2 x2^2, constraint x1 + 2 x2 = 3
    from clusterlag.graph import Graph
    from clusterlag.model import AgentSpec, EqualityConstraint, Problem, QuadraticCost
    p2 = Problem((AgentSpec(1, (QuadraticCost(1.0, 0.5),)), AgentSpec(2, (QuadraticCost(2.0),))),
                 (EqualityConstraint({1: (1.0,), 2: (2.0,)}, 3.0),), Graph.from_edges([1, 2], [(1, 2)]))
    x = np.array([0.4, -1.1])
    nu = np.array([0.7])
    rho = 1.5
    r = x[0] + 2 * x[1] - 3
    dnu, dx = centralized_rhs(nu, x, p2, rho)
    assert dnu[0] == pytest.approx(r)
    assert dx[0] == pytest.approx(-(2 * x[0] + 0.5) - nu[0] - rho * r)
    assert dx[1] == pytest.approx(-(4 * x[1]) - 2 * nu[0] - 2 * rho * r)
    # rho = 0 drops the augmentation term
    dnu0, dx0 = centralized_rhs(nu, x, p2, 0.0)
    assert dx0[1] == pytest.approx(-(4 * x[1]) - 2 * nu[0])


def test_rk4_on_linear_decay():
    f = lambda t, y: -y
    t, y = 0.0, np.array([1.0])
    for _ in range(100):
        t, y = rk4_step(f, (t, y), 0.01)
    assert y[0] == pytest.approx(math.exp(-1), abs=1e-7)
    errs = []
    for h in (0.1, 0.05):
        rec = integrate(f, [1.0], h, 1.0)
        errs.append(abs(rec.x()[-1, 0] - math.exp(-1)))
    assert 14 < errs[0] / errs[1] < 18


def test_compiled_path_matches_python_path():
    prob = example1()
    lays = build_layouts(prob)
    sys_ = DistributedSystem(prob, lays, GainConfig.uniform(prob), True, PenaltyConfig(0.5))
    s0 = init_state(prob, lays)
    fast = integrate(sys_, s0, 1e-3, 2.0, sample_every=500)
    slow = integrate(lambda t, y: sys_(t, y), s0.vec, 1e-3, 2.0, sample_every=500)
    np.testing.assert_allclose(fast.segments[0].data, slow.segments[0].data, rtol=1e-11, atol=1e-9)


def test_integrate_snaps_and_diverges():
    with pytest.warns(UserWarning, match="multiple"):
        integrate(lambda t, y: -y, [1.0], 0.3, 1.0)
    with pytest.raises(DivergenceError) as info, np.errstate(over="ignore"):
        integrate(lambda t, y: y * y, [10.0], 0.01, 5.0)
    assert info.value.t > 0
    with pytest.raises(ValueError):
        integrate(lambda t, y: -y, [1.0], 0.0, 1.0)


def test_stop_criterion_early_exit():
    prob = random_quadratic(4, boxed=False)
    lays = build_layouts(prob)
    sys_ = DistributedSystem(prob, lays, GainConfig.uniform(prob))
    rec = integrate(sys_, init_state(prob, lays), 1e-3, 200.0, sample_every=100, stop=StopCriterion(1e-6))
    assert rec.converged and rec.stop_time < 200
    assert rec.times[-1] == rec.stop_time
    assert all(v <= 1e-6 for v in rec.final_residuals.values())


def test_schedule_validation():
    lays = build_layouts(example1())
    with pytest.raises(LayoutError):
        TopologySchedule([(1.0, lays)])
    with pytest.raises(LayoutError):
        TopologySchedule([(0.0, lays), (2.0, lays), (2.0, lays)])
    sched = TopologySchedule.periodic([lays, lays], 5.0, 20.0)
    assert [t for t, _ in sched.entries] == [0.0, 5.0, 10.0, 15.0]


def test_reindex_carries_by_node_and_keeps_y_sum():
    old = StateLayout(((1, 2, 3),), 2)
    new = StateLayout(((2, 3, 4),), 2)
    vec = old.pack([[1.0, 2.0, -3.0]], [[10.0, 20.0, 30.0]], [7.0, 8.0])
    out = reindex(vec, old, new)
    y, v = out[new.y_slice(0)], out[new.v_slice(0)]
    np.testing.assert_array_equal(v, [20.0, 30.0, 0.0])
    np.testing.assert_array_equal(y, [3.0, -3.0, 0.0])
    np.testing.assert_array_equal(out[new.x_slice], [7.0, 8.0])


def test_switching_run_splits_segments():
    prob = example1()
    a = build_layouts(prob)
    b = build_layouts(prob, edges={0: [(1, 2), (2, 3), (3, 4)], 1: [(3, 4), (4, 5), (5, 6)]})
    sys_ = DistributedSystem(prob, a, GainConfig.uniform(prob), True, PenaltyConfig(0.5))
    sched = TopologySchedule.periodic([a, b], 1.0, 3.0)
    rec = integrate(sys_, init_state(prob, a), 1e-3, 3.0, sample_every=100, schedule=sched)
    assert len(rec.segments) == 3
    assert rec.segments[1].system.layouts[0].same_topology(b[0])
    with pytest.warns(UserWarning, match="snapped"):
        integrate(sys_, init_state(prob, a), 1e-3, 1.0, schedule=TopologySchedule([(0.0, a), (0.5004, b)]))


def test_cost_phase_swap():
    prob = example2(0)
    lays = build_layouts(prob)
    sys_ = DistributedSystem(prob, lays, GainConfig.uniform(prob), True, PenaltyConfig(0.01, 200.0))
    rec = integrate(sys_, init_state(prob, lays), 1e-3, 2.0, sample_every=100, phases=[(1.0, example2(1))])
    assert rec.segments[0].system.problem.name.endswith("phase1")
    assert rec.segments[1].system.problem.name.endswith("phase2")


def test_flat_cost_dichotomy_short():
    prob = appendix_b()
    lays = build_layouts(prob)
    for rho, expect in ((1.0, True), (0.0, False)):
        sys_ = DistributedSystem(prob, lays, GainConfig.uniform(prob, rho=rho))
        rec = integrate(sys_, init_state(prob, lays), 1e-3, 100.0, sample_every=100, stop=StopCriterion(1e-6))
        assert rec.converged is expect


def test_step_helpers():
    prob = example1()
    lays = build_layouts(prob)
    sys_ = DistributedSystem(prob, lays, GainConfig.uniform(prob), True, PenaltyConfig(1e-3))
    assert suggest_step(sys_) < 1e-5
    eps = stable_epsilon(sys_, 1e-3)
    sys2 = DistributedSystem(prob, lays, GainConfig.uniform(prob), True, PenaltyConfig(eps))
    assert suggest_step(sys2) == pytest.approx(1e-3, rel=1e-9)


def _tiny_run(tmp_path, name):
    prob = example1()
    lays = build_layouts(prob)
    sys_ = DistributedSystem(prob, lays, GainConfig.uniform(prob), True, PenaltyConfig(0.5))
    rec = integrate(sys_, init_state(prob, lays), 1e-3, 0.5, sample_every=50)
    path = tmp_path / name
    write_trajectory_csv(rec, path, prob)
    return path, rec


def test_csv_layout_and_determinism(tmp_path):
    p1, rec = _tiny_run(tmp_path, "a.csv")
    p2, _ = _tiny_run(tmp_path, "b.csv")
    assert p1.read_bytes() == p2.read_bytes()
    rows = list(csv.reader(p1.open()))
    header = rows[0]
    assert header[:5] == ["t", "y[1][1]", "y[1][2]", "y[1][3]", "y[1][4]"]
    assert header[9:10] == ["v[1][1]"]
    assert header[-1] == "x[6][1]" and len(header) == 1 + 8 + 8 + 12
    assert len(rows) == 1 + len(rec)
    np.testing.assert_array_equal([float(v) for v in rows[-1][1:]], rec.segments[0].data[-1])
