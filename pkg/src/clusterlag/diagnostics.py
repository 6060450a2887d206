"""Trajectory analysis: conservation, aggregate dual identity, consensus,
equilibrium residuals and empirical convergence rates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import AlgorithmState, DistributedSystem, TrajectoryRecord, init_state
from .graph import disagreement
from .model import GainConfig, Problem
from .oracle import KKTPoint


class FitUnavailable(ValueError):
    pass


def _cluster_count(tr: TrajectoryRecord) -> int:
    return len(tr.segments[0].layout.clusters)


def state_norm_max(tr: TrajectoryRecord) -> float:
    return float(max(np.linalg.norm(seg.data, axis=1).max() for seg in tr.segments))


def conservation_drift(tr: TrajectoryRecord, layouts=None) -> list[float]:
    """Per cluster, the largest departure of ``sum_l y_k^l`` from its initial value."""
    out = []
    for k in range(_cluster_count(tr)):
        sums = np.concatenate([seg.data[:, seg.layout.y_slice(k)].sum(axis=1) for seg in tr.segments])
        out.append(float(np.abs(sums - sums[0]).max()))
    return out


def conservation_tolerance(tr: TrajectoryRecord) -> float:
    return 1e-9 * (1.0 + state_norm_max(tr))


def _uniform_samples(tr: TrajectoryRecord) -> tuple[np.ndarray, list]:
    times = tr.times
    if len(times) < 3:
        raise ValueError("need at least three samples")
    # segment joins repeat the switch time; keep one copy
    keep = np.concatenate([[True], np.diff(times) > 0])
    dt = np.diff(times[keep])
    if np.abs(dt - dt[0]).max() > 1e-9 * max(1.0, abs(times[-1])):
        raise ValueError("aggregate identity needs uniformly spaced samples")
    return keep, dt


def aggregate_dual_identity(tr: TrajectoryRecord, problem: Problem | None = None, layouts=None) -> list[float]:
    """Per cluster, max over interior samples of ``|d/dt sum_l v_k^l - ([W]_k x - b_k)|``.

    The derivative is a centered difference, so the residual carries an
    ``O(h^2)`` truncation term.  Endpoints are excluded.
    """
    keep, dt = _uniform_samples(tr)
    h = dt[0]
    out = []
    for k in range(_cluster_count(tr)):
        vs, rs = [], []
        for seg in tr.segments:
            prob = problem if problem is not None and len(tr.segments) == 1 else seg.system.problem
            vs.append(seg.data[:, seg.layout.v_slice(k)].sum(axis=1))
            rs.append(seg.data[:, seg.layout.x_slice] @ prob.W[k] - prob.b[k])
        V = np.concatenate(vs)[keep]
        R = np.concatenate(rs)[keep]
        fd = (V[2:] - V[:-2]) / (2 * h)
        out.append(float(np.abs(fd - R[1:-1]).max()))
    return out


def consensus_error(tr: TrajectoryRecord, layouts=None) -> np.ndarray:
    """Disagreement of each cluster's ``v`` copies at every sample, shape (samples, clusters)."""
    cols = []
    for k in range(_cluster_count(tr)):
        cols.append(np.concatenate([
            np.linalg.norm(D - D.mean(axis=1, keepdims=True), axis=1)
            for D in (seg.data[:, seg.layout.v_slice(k)] for seg in tr.segments)]))
    return np.stack(cols, axis=1)


def equality_violation(tr: TrajectoryRecord) -> np.ndarray:
    out = []
    for seg in tr.segments:
        prob = seg.system.problem
        X = seg.data[:, seg.layout.x_slice]
        out.append(np.abs(X @ prob.W.T - prob.b).max(axis=1) if prob.p else np.zeros(len(X)))
    return np.concatenate(out)


def oracle_equilibrium(problem: Problem, layouts, pt: KKTPoint) -> AlgorithmState:
    """The equilibrium built from a KKT point: ``v_k = nu_k 1`` and ``y_k = [w]x - bbar``."""
    s = init_state(problem, layouts, x0=pt.x_star)
    lay = s.layout
    vec = s.vec.copy()
    xs = problem.split(pt.x_star)
    for k, L in enumerate(layouts):
        vec[lay.v_slice(k)] = pt.nu_star[k]
        c = problem.constraints[k]
        vec[lay.y_slice(k)] = [float(c.row(problem.agent(n)) @ xs[n]) - L.bbar[n] for n in L.nodes]
    return AlgorithmState(0.0, vec, lay)


@dataclass
class EquilibriumCheck:
    residual: float
    consensus: list[float]
    stationarity: float
    y_mismatch: list[float]

    def to_dict(self):
        return dict(self.__dict__)


def equilibrium_residual(s: AlgorithmState, problem: Problem, layouts, gains: GainConfig,
                         use_penalized: bool = False, penalty=None) -> EquilibriumCheck:
    """Fixed-point residual of the distributed flow, plus the separate equilibrium conditions.

    ``y_mismatch`` compares ``y_k`` with ``[w]x - bbar`` after removing the
    common offset that a nonzero ``sum y`` would introduce.
    """
    sys_ = DistributedSystem(problem, layouts, gains, use_penalized, penalty)
    vec = s.vec
    lay = sys_.state_layout
    res = float(np.linalg.norm(sys_(s.t, vec)))
    xs = problem.split(vec[lay.x_slice])
    cons, ym = [], []
    theta = np.zeros(problem.p)
    for k, L in enumerate(layouts):
        v = vec[lay.v_slice(k)]
        cons.append(disagreement(v))
        theta[k] = v.mean()
        c = problem.constraints[k]
        target = np.array([float(c.row(problem.agent(n)) @ xs[n]) - L.bbar[n] for n in L.nodes])
        d = vec[lay.y_slice(k)] - target
        ym.append(float(np.abs(d - d.mean()).max()))
    g = sys_.grad(vec[lay.x_slice])
    stat = float(np.abs(g + problem.W.T @ theta).max()) if problem.p else float(np.abs(g).max())
    return EquilibriumCheck(res, cons, stat, ym)


def distance_to(tr: TrajectoryRecord, x_ref) -> np.ndarray:
    return np.linalg.norm(tr.x() - np.asarray(x_ref), axis=1)


def rate_fit(tr: TrajectoryRecord, reference, window: tuple[float, float] | None = None,
             floor: float = 1e-8, skip_fraction: float = 0.1) -> tuple[float, float]:
    """Least-squares slope and R^2 of ``log ||x(t) - x*||`` against ``t``.

    ``reference`` is a ``KKTPoint`` or a primal vector.  Only the stretch
    before the error first drops under ``floor`` is used; its first
    ``skip_fraction`` is dropped, as are samples above half the initial error
    and samples outside ``window`` when given.
    """
    x_ref = reference.x_star if isinstance(reference, KKTPoint) else reference
    return fit_exponential(tr.times, distance_to(tr, x_ref), window, floor, skip_fraction)


def fit_exponential(times, err, window=None, floor: float = 1e-8, skip_fraction: float = 0.1):
    times = np.asarray(times, dtype=float)
    err = np.asarray(err, dtype=float)
    e0 = err[0]
    # the decaying stretch ends where the error first reaches the floor
    below = np.flatnonzero(err < floor)
    end = int(below[0]) if below.size else len(times)
    mask = np.zeros(len(times), dtype=bool)
    mask[int(math.ceil(skip_fraction * end)):end] = True
    mask &= err <= 0.5 * e0
    if window is not None:
        mask &= (times >= window[0]) & (times <= window[1])
    if mask.sum() < 3:
        raise FitUnavailable("error never decays far enough below its initial value to fit a rate")
    t, le = times[mask], np.log(err[mask])
    A = np.vstack([t, np.ones_like(t)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, le, rcond=None)
    pred = A @ np.array([slope, icpt])
    ss_res = float(((le - pred) ** 2).sum())
    ss_tot = float(((le - le.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(r2)


def time_to_tolerance(tr: TrajectoryRecord, tol: float) -> float | None:
    """First sample time from which equality violation and consensus error stay below ``tol``."""
    bad = (equality_violation(tr) > tol) | (consensus_error(tr).max(axis=1, initial=0.0) > tol)
    if bad[-1]:
        return None
    idx = np.flatnonzero(bad)
    t = tr.times
    return float(t[idx[-1] + 1]) if idx.size else float(t[0])


@dataclass
class ConvergenceReport:
    time_to_tolerance: float | None
    final_residuals: dict
    rate: float | None
    r_squared: float | None
    conservation: list[float]
    stop_time: float | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "time_to_tolerance": self.time_to_tolerance,
            "converged": self.stop_time is not None,
            "stop_time": self.stop_time,
            "final_residuals": self.final_residuals,
            "rate": self.rate,
            "r_squared": self.r_squared,
            "conservation_drift": self.conservation,
            "notes": self.notes,
        }


def convergence_report(tr: TrajectoryRecord, tol: float = 1e-6, reference=None) -> ConvergenceReport:
    rate = r2 = None
    notes = []
    if reference is not None:
        try:
            rate, r2 = rate_fit(tr, reference)
        except FitUnavailable as exc:
            notes.append(f"rate fit unavailable: {exc}")
    final = {k: abs(float(v)) for k, v in (tr.final_residuals or {}).items()}
    return ConvergenceReport(time_to_tolerance(tr, tol), final, rate, r2, conservation_drift(tr),
                             tr.stop_time, notes)
