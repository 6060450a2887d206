"""Desk-scale invariant suite behind ``clusterlag check``.

Every check returns ``(name, passed, detail)``; failures never abort the run.
"""

from __future__ import annotations

import traceback
from typing import Callable

import numpy as np

from . import diagnostics as dg
from .dynamics import DistributedSystem, build_layouts, init_state, integrate
from .graph import Graph, diameter, is_connected, laplacian, max_consensus, spectrum
from .model import GainConfig, QuadraticCost, SmoothDeadzoneCost, split_b
from .oracle import kkt_residual, solve_boxed_qp, solve_equality_qp
from .penalty import mu_bound_single, p_eps, p_eps_grad
from .scenarios import random_graph, random_quadratic, table1


class FlippedResidualSystem(DistributedSystem):
    """Mutant with the sign of the local constraint residual flipped in the ``v`` equation."""

    def _compile(self):
        super()._compile()
        S = self.state_layout.slots
        V, X = slice(S, 2 * S), slice(2 * S, None)
        self.M[V, X] = -self.M[V, X]
        self.c[V] = -self.c[V]


def _random_unit_graph(rng, n):
    A = (rng.random((n, n)) < rng.uniform(0.05, 0.6)).astype(float)
    A = np.triu(A, 1)
    return Graph(tuple(range(1, n + 1)), A + A.T)


def check_graphs(seed: int):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(100):
        g = _random_unit_graph(rng, int(rng.integers(1, 51)))
        L = laplacian(g)
        worst = max(worst, float(np.abs(L.sum(axis=1)).max(initial=0.0)))
        if is_connected(g) != spectrum(g).connected():
            return False, f"BFS and spectrum disagree on a {g.n}-node graph"
    for _ in range(100):
        g = random_graph(rng, range(1, int(rng.integers(2, 21))))
        vals = rng.normal(size=g.n)
        out = max_consensus(g, vals, rounds=diameter(g))
        if not np.all(out == vals.max()):
            return False, "max-consensus missed the maximum"
    return worst == 0.0, f"max |L 1| = {worst:g}"


def check_costs(seed: int):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(200):
        c = (QuadraticCost(rng.uniform(0, 2), rng.normal(), rng.normal()) if rng.random() < 0.5
             else SmoothDeadzoneCost(rng.uniform(0.1, 3), rng.uniform(0.01, 1)))
        x = rng.uniform(-6, 6)
        fd = (c.value(x + 1e-6) - c.value(x - 1e-6)) / 2e-6
        worst = max(worst, abs(fd - float(c.grad(x))) / (1 + abs(float(c.grad(x)))))
        z = rng.uniform(-6, 6)
        if (z - x) * (float(c.grad(z)) - float(c.grad(x))) < -1e-12:
            return False, "monotone-gradient test failed"
    return worst < 1e-5, f"worst relative gradient error {worst:.2e}"


def check_split(seed: int):
    rng = np.random.default_rng(seed)
    for _ in range(200):
        n = int(rng.integers(1, 9))
        core = tuple(range(1, n + 1))
        cluster = core + tuple(range(n + 1, n + 1 + int(rng.integers(0, 3))))
        b = float(rng.normal() * 10 ** rng.uniform(-3, 4))
        out = split_b("equal_core", core, cluster, b)
        if sum(out[i] for i in cluster) != b:
            return False, f"split of {b!r} over {n} nodes does not sum exactly"
    return True, "200 splits exact"


def check_penalty(seed: int):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(100):
        e = float(10 ** rng.uniform(-4, 1))
        for y in (0.0, e):
            lo, hi = np.nextafter(y, -np.inf), np.nextafter(y, np.inf)
            worst = max(worst, abs(p_eps(lo, e) - p_eps(hi, e)), abs(p_eps_grad(lo, e) - p_eps_grad(hi, e)))
    return worst < 1e-12, f"largest jump at a branch point {worst:.1e}"


def check_multiplier_bound(seed: int):
    ratios = []
    for s in range(seed, seed + 10):
        prob = table1(s)
        pt = solve_boxed_qp(prob)
        mb = mu_bound_single(prob).value
        if pt.mu_max > mb:
            return False, f"seed {s}: mu_max {pt.mu_max:g} exceeds bound {mb:g}"
        if kkt_residual(pt, prob).max() > 1e-8:
            return False, f"seed {s}: oracle KKT residual too large"
        ratios.append(mb / max(pt.mu_max, 1e-300))
    return True, f"median bound/mu_max {np.median(ratios):.2f}"


def _short_run(seed: int, system_cls=DistributedSystem, t_end: float = 5.0):
    prob = random_quadratic(seed, boxed=False)
    lays = build_layouts(prob)
    sys_ = system_cls(prob, lays, GainConfig.uniform(prob))
    rec = integrate(sys_, init_state(prob, lays), 1e-3, t_end, sample_every=1)
    return prob, lays, rec


def check_conservation(seed: int):
    prob, lays, rec = _short_run(seed)
    drift = max(dg.conservation_drift(rec))
    ident = max(dg.aggregate_dual_identity(rec, prob))
    tol = dg.conservation_tolerance(rec)
    ok = drift <= tol and ident <= 1e-5 * (1 + np.abs(prob.b).max())
    return ok, f"drift {drift:.1e} (tol {tol:.1e}), identity residual {ident:.1e}"


def check_equilibrium(seed: int):
    prob = random_quadratic(seed, boxed=False)
    lays = build_layouts(prob)
    x, nu = solve_equality_qp(prob)
    from .oracle import KKTPoint
    pt = KKTPoint(x, nu, np.zeros(prob.m), np.zeros(prob.m))
    res = dg.equilibrium_residual(dg.oracle_equilibrium(prob, lays, pt), prob, lays, GainConfig.uniform(prob))
    return res.residual <= 1e-8, f"fixed-point residual {res.residual:.1e}"


def check_mutant(seed: int):
    prob, lays, rec = _short_run(seed, FlippedResidualSystem, t_end=1.0)
    ident = max(dg.aggregate_dual_identity(rec, prob))
    flagged = ident > 1e-5 * (1 + np.abs(prob.b).max())
    return flagged, f"mutant identity residual {ident:.2e} ({'caught' if flagged else 'missed'})"


CHECKS: dict[str, Callable[[int], tuple[bool, str]]] = {
    "graph.laplacian_and_connectivity": check_graphs,
    "model.cost_gradients_and_convexity": check_costs,
    "model.split_exact": check_split,
    "penalty.smooth_at_branches": check_penalty,
    "penalty.single_constraint_bound": check_multiplier_bound,
    "dynamics.conservation_and_identity": check_conservation,
    "dynamics.equilibrium_fixed_point": check_equilibrium,
    "dynamics.mutant_detected": check_mutant,
}


def run_checks(seeds=(0,), names=None) -> list[dict]:
    results = []
    for seed in seeds:
        for name, fn in CHECKS.items():
            if names and name not in names:
                continue
            try:
                ok, detail = fn(seed)
            except Exception as exc:  # aggregate, never abort
                ok, detail = False, f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"
            results.append({"check": name, "seed": seed, "passed": bool(ok), "detail": detail})
    return results
