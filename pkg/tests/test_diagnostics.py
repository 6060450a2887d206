import numpy as np
import pytest

from clusterlag import diagnostics as dg
from clusterlag.checks import FlippedResidualSystem, run_checks
from clusterlag.dynamics import (AlgorithmState, DistributedSystem, Segment, TrajectoryRecord, build_layouts,
                                 init_state, integrate)
from clusterlag.model import GainConfig
from clusterlag.oracle import KKTPoint, solve_equality_qp
from clusterlag.scenarios import example1, random_quadratic


def _run(seed=3, t_end=20.0, every=10, system_cls=DistributedSystem):
    prob = random_quadratic(seed, boxed=False)
    lays = build_layouts(prob)
    sys_ = system_cls(prob, lays, GainConfig.uniform(prob))
    rec = integrate(sys_, init_state(prob, lays), 1e-3, t_end, sample_every=every)
    return prob, lays, sys_, rec


def _constant_record(sys_, vec, n=10, h=0.1):
    times = np.arange(n) * h
    return TrajectoryRecord([Segment(sys_.state_layout, times, np.tile(vec, (n, 1)), sys_)], h)


def test_fit_recovers_known_rate():
    t = np.linspace(0, 8, 801)
    slope, r2 = dg.fit_exponential(t, 3.0 * np.exp(-2 * t))
    assert slope == pytest.approx(-2.0, abs=0.01)
    assert r2 > 0.999
    with pytest.raises(dg.FitUnavailable):
        dg.fit_exponential(t, np.ones_like(t))


def test_conservation_on_real_and_corrupted_runs():
    prob, lays, sys_, rec = _run()
    assert max(dg.conservation_drift(rec)) <= dg.conservation_tolerance(rec)
    seg = rec.segments[0]
    data = seg.data.copy()
    data[5:, seg.layout.y_slice(0).start] += 1e-3
    bad = TrajectoryRecord([Segment(seg.layout, seg.times, data, sys_)], rec.h)
    assert dg.conservation_drift(bad)[0] == pytest.approx(1e-3)


def test_identity_holds_and_rejects_irregular_sampling():
    prob, lays, sys_, rec = _run(t_end=5.0, every=1)
    tol = 1e-5 * (1 + np.abs(prob.b).max())
    assert max(dg.aggregate_dual_identity(rec)) <= tol
    seg = rec.segments[0]
    keep = np.ones(len(seg.times), dtype=bool)
    keep[7] = False
    gappy = TrajectoryRecord([Segment(seg.layout, seg.times[keep], seg.data[keep], sys_)], rec.h)
    with pytest.raises(ValueError, match="uniformly"):
        dg.aggregate_dual_identity(gappy)


def test_identity_catches_sign_mutant():
    prob, lays, _, rec = _run(t_end=1.0, every=1, system_cls=FlippedResidualSystem)
    assert max(dg.aggregate_dual_identity(rec)) > 1e-5 * (1 + np.abs(prob.b).max())


def test_constant_trajectory_has_zero_drift():
    prob, lays, sys_, _ = _run(t_end=0.01)
    rng = np.random.default_rng(0)
    rec = _constant_record(sys_, rng.normal(size=init_state(prob, lays).vec.size))
    assert dg.conservation_drift(rec) == [0.0] * prob.p


def test_equilibrium_check_flags_perturbation():
    prob = random_quadratic(8, boxed=False)
    lays = build_layouts(prob)
    x, nu = solve_equality_qp(prob)
    eq = dg.oracle_equilibrium(prob, lays, KKTPoint(x, nu, np.zeros(prob.m), np.zeros(prob.m)))
    gains = GainConfig.uniform(prob)
    good = dg.equilibrium_residual(eq, prob, lays, gains)
    assert good.residual < 1e-9 and good.stationarity < 1e-9
    assert max(good.consensus) < 1e-12 and max(good.y_mismatch) < 1e-9
    vec = eq.vec.copy()
    vec[eq.layout.x_slice.start] += 0.1
    bad = dg.equilibrium_residual(AlgorithmState(0.0, vec, eq.layout), prob, lays, gains)
    assert bad.residual > 1e-3 and bad.stationarity > 1e-3


def test_dispatch_start_is_not_an_equilibrium():
    prob = example1()
    lays = build_layouts(prob)
    chk = dg.equilibrium_residual(init_state(prob, lays), prob, lays, GainConfig.uniform(prob))
    assert chk.residual > 1.0


def test_consensus_and_violation_decay():
    prob, lays, sys_, rec = _run(t_end=40.0, every=100)
    cons = dg.consensus_error(rec)
    assert cons.shape == (len(rec), prob.p)
    viol = dg.equality_violation(rec)
    assert viol[-1] < 1e-3 * viol[0]
    assert dg.time_to_tolerance(rec, 1e-3) is not None
    x, nu = solve_equality_qp(prob)
    report = dg.convergence_report(rec, 1e-3, x)
    assert report.rate < 0 and report.to_dict()["converged"] is False


def test_diagnostics_are_pure():
    prob, lays, sys_, rec = _run(t_end=5.0, every=1)
    before = rec.segments[0].data.copy()
    a = (dg.conservation_drift(rec), dg.aggregate_dual_identity(rec), dg.consensus_error(rec).tolist())
    b = (dg.conservation_drift(rec), dg.aggregate_dual_identity(rec), dg.consensus_error(rec).tolist())
    assert a == b
    np.testing.assert_array_equal(before, rec.segments[0].data)


def test_check_suite_passes_on_seed_zero():
    results = run_checks([0])
    failed = [r for r in results if not r["passed"]]
    assert not failed, failed
    assert {r["check"] for r in results} >= {"dynamics.mutant_detected", "graph.laplacian_and_connectivity"}
