"""Command-line runner: ``solve``, ``bounds``, ``check`` and ``oracle``."""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from .dynamics import (DistributedSystem, DivergenceError, LayoutError, StopCriterion, TopologySchedule,
                       build_layouts, communication_counts, init_state, integrate, stable_epsilon,
                       suggest_step, write_trajectory_csv)
from .graph import max_consensus
from .model import GainConfig, Problem, ProblemValidationError, grad_inf_bound, validate
from .oracle import OracleError, centralized_flow_solve, kkt_residual, licq_holds, solve_boxed_qp
from .penalty import (BoundPreconditionError, PenaltyConfig, gamma_auto, gap_bound, mu_bound_licq,
                      mu_bound_single)
from . import scenarios

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_INVALID = 0, 2, 3

DEFAULT_T_END = {"example1": 1000.0, "example2": 1000.0, "appendixB": 500.0, "table1": 100.0}
RK4_STABILITY = 2.78
# the sensor penalty (gamma / epsilon = 2e4) is too stiff for the usual step
DEFAULT_STEP = {"example2": 5e-5}


class ConfigError(ValueError):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--scenario", choices=sorted(scenarios.BUILTINS))
    src.add_argument("--problem", type=Path, help="problem JSON file")
    common.add_argument("--seed", type=int, help="seed for randomised scenarios")
    common.add_argument("--rho", type=float, default=None)
    common.add_argument("--beta", type=float, default=None)
    common.add_argument("--epsilon", type=float, default=None)
    common.add_argument("--gamma", default=None, help="penalty weight or 'auto'")
    common.add_argument("--adjusted-bounds", action="store_true")
    common.add_argument("--out", type=Path, default=None, help="output directory")

    ap = argparse.ArgumentParser(prog="clusterlag", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", parents=[common], help="simulate the distributed flow")
    s.add_argument("--step", type=float, default=None)
    s.add_argument("--t-end", type=float, default=None)
    s.add_argument("--tol", type=float, default=None)
    s.add_argument("--sample-every", type=int, default=None)
    s.add_argument("--full-graph", action="store_true", help="every cluster spans the whole graph")
    s.add_argument("--topology-schedule", type=Path, default=None)
    b = sub.add_parser("bounds", parents=[common], help="multiplier bounds and penalty weight")
    b.add_argument("--distributed", action="store_true",
                   help="compute the gradient-bound maximum by max-consensus")
    c = sub.add_parser("check", help="run the invariant suite")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    c.add_argument("--out", type=Path, default=None)
    sub.add_parser("oracle", parents=[common], help="centralized reference solution")
    return ap


# --------------------------------------------------------------------------
# configuration

def load_problem(args) -> tuple[Problem, dict]:
    """Problem plus whatever extra settings a problem file carries."""
    if args.problem is not None:
        cfg = scenarios.load_config(args.problem)
        return scenarios.problem_from_dict(cfg), cfg
    if args.scenario is None:
        raise ConfigError("give --scenario or --problem")
    if args.scenario == "table1" and args.seed is None:
        raise ConfigError("the table1 scenario is random; pass --seed")
    return scenarios.builtin(args.scenario, args.seed), {}


def _pick(cli, cfg: dict, key: str, default):
    if cli is not None:
        return cli
    return cfg.get(key, default)


def _penalty(args, cfg: dict) -> PenaltyConfig:
    pc = cfg.get("penalty", {})
    eps = float(_pick(args.epsilon, pc, "epsilon", 0.01 if args.scenario == "example2" else 1e-3))
    gamma = _pick(args.gamma, pc, "gamma", 200.0 if args.scenario == "example2" else "auto")
    if gamma != "auto":
        gamma = float(gamma)
    return PenaltyConfig(eps, gamma, bool(args.adjusted_bounds or pc.get("adjusted_bounds", False)))


def _clusters(cfg: dict):
    raw = cfg.get("clusters")
    if not raw:
        return None
    return {int(k) - 1: v for k, v in raw.items()}


def _edges(raw):
    if not raw:
        return None
    return {int(k) - 1: [tuple(e) for e in v] for k, v in raw.items()}


def load_schedule(path: Path, problem: Problem, beta: float, full_graph: bool) -> TopologySchedule:
    """``{"period": T, "t_end": T_end, "layouts": [...]}`` or ``{"entries": [{"t": ..., ...}]}``.

    Each layout is ``{"clusters": {k: nodes}, "edges": {k: [[i, j], ...]}}`` with 1-based ``k``.
    """
    d = json.loads(Path(path).read_text())

    def lay(spec):
        return build_layouts(problem, beta, full_graph=full_graph, clusters=_clusters(spec),
                             edges=_edges(spec.get("edges")))

    if "entries" in d:
        return TopologySchedule([(float(e["t"]), lay(e)) for e in d["entries"]])
    return TopologySchedule.periodic([lay(s) for s in d["layouts"]], float(d["period"]), float(d["t_end"]))


def _has_boxes(problem: Problem) -> bool:
    return bool(np.isfinite(problem.lower).any() or np.isfinite(problem.upper).any())


def _oracle(problem: Problem, penalty: PenaltyConfig | None, rho: float):
    """Reference point and a note on how it was obtained."""
    if problem.is_quadratic() and all(c.alpha > 0 for c in problem.costs):
        pt = solve_boxed_qp(problem)
        return pt.x_star, pt, "active-set enumeration"
    sol = centralized_flow_solve(problem, rho, penalty)
    return sol.x, None, "centralized flow"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


# --------------------------------------------------------------------------
# subcommands

def run_solve(args) -> int:
    problem, cfg = load_problem(args)
    validate(problem)
    gains_cfg = cfg.get("gains", {})
    integ = cfg.get("integration", {})
    rho = float(_pick(args.rho, gains_cfg, "rho", 1.0))
    beta = float(_pick(args.beta, gains_cfg, "beta", 1.0))
    h = float(_pick(args.step, integ, "step", DEFAULT_STEP.get(args.scenario, 1e-3)))
    t_end = float(_pick(args.t_end, integ, "t_end", DEFAULT_T_END.get(args.scenario, 100.0)))
    tol = float(_pick(args.tol, integ, "tol", 1e-6))
    stride = int(_pick(args.sample_every, integ, "sample_every", max(1, int(round(0.1 / h)))))
    boxed = _has_boxes(problem)
    penalty = _penalty(args, cfg) if boxed else None
    layouts = build_layouts(problem, beta, full_graph=args.full_graph, clusters=_clusters(cfg),
                            edges=_edges(cfg.get("edges")))
    gains = GainConfig.uniform(problem, rho, beta)
    system = DistributedSystem(problem, layouts, gains, use_penalized=boxed, penalty=penalty)
    if system.penalty is not None and h * system.stiffness() > RK4_STABILITY:
        print(f"warning: step {h:g} exceeds the stable step {suggest_step(system):.3g} for this penalty; "
              f"expect chattering near the box edges (epsilon >= {stable_epsilon(system, h):.3g} "
              f"would be stable)", file=sys.stderr)
    schedule = None
    if args.topology_schedule is not None:
        schedule = load_schedule(args.topology_schedule, problem, beta, args.full_graph)
        system = DistributedSystem(problem, schedule.entries[0][1], gains, boxed, penalty)
        layouts = schedule.entries[0][1]
    phases = scenarios.example2_phases() if args.scenario == "example2" else None
    min_time = max([t for t, _ in phases], default=0.0) if phases else 0.0
    if schedule is not None:
        min_time = max(min_time, schedule.entries[-1][0])
    out = args.out or Path("out")
    out.mkdir(parents=True, exist_ok=True)

    report: dict = {"problem": problem.name, "h": h, "t_end": t_end, "tol": tol, "rho": rho, "beta": beta,
                    "layouts": [list(L.nodes) for L in layouts],
                    "communication_counts": communication_counts(problem, layouts)}
    if system.penalty is not None:
        report["penalty"] = {"epsilon": system.penalty.epsilon, "gamma": system.penalty.gamma_value(),
                             "adjusted_bounds": system.penalty.adjusted_bounds,
                             "gap_bound": gap_bound(system.penalty.epsilon, system.penalty.gamma_value(),
                                                    problem.N)}
        if system.multiplier_bound is not None:
            report["penalty"]["multiplier_bound"] = system.multiplier_bound.to_dict()
    t0 = time.perf_counter()
    try:
        rec = integrate(system, init_state(problem, layouts), h, t_end, sample_every=stride,
                        schedule=schedule, stop=StopCriterion(tol, min_time), phases=phases,
                        check_every=max(1, min(stride, int(round(1.0 / h)))))
    except DivergenceError as exc:
        report["diverged_at"] = exc.t
        _write_json(out / "report.json", report)
        print(f"diverged at t = {exc.t:g}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    report["wall_time"] = time.perf_counter() - t0
    final_problem = rec.segments[-1].system.problem
    x = rec.x()[-1]
    ref = None
    try:
        x_ref, _, how = _oracle(final_problem, system.penalty, 1.0)
        ref = x_ref
        report["oracle"] = {"method": how, "x": x_ref, "max_abs_error": float(np.abs(x - x_ref).max()),
                            "cost": final_problem.total_cost(x_ref)}
    except OracleError as exc:
        report["oracle"] = {"skipped": str(exc)}
    conv = dg.convergence_report(rec, tol, ref if phases is None else None)
    report["convergence"] = conv.to_dict()
    report["final"] = {"x": x, "cost": final_problem.total_cost(x),
                       "x_by_agent": {str(i): v for i, v in final_problem.split(x).items()}}
    write_trajectory_csv(rec, out / "trajectory.csv", problem)
    _write_json(out / "report.json", report)
    status = "converged" if rec.converged else "not converged"
    print(f"{problem.name}: {status} at t = {rec.stop_time if rec.converged else rec.times[-1]:g}; "
          f"cost {final_problem.total_cost(x):.6g}; artifacts in {out}")
    return EXIT_OK if rec.converged else EXIT_NOT_CONVERGED


def run_bounds(args) -> int:
    problem, cfg = load_problem(args)
    validate(problem)
    penalty = _penalty(args, cfg)
    report: dict = {"problem": problem.name, "N": problem.N}
    bounds = {}
    for name, fn in (("single_constraint", mu_bound_single), ("licq", mu_bound_licq)):
        try:
            bounds[name] = fn(problem).to_dict()
        except BoundPreconditionError as exc:
            bounds[name] = {"unavailable": str(exc)}
    report["bounds"] = bounds
    usable = [b["value"] for b in bounds.values() if "value" in b]
    if not usable:
        print("no multiplier bound applies: " + "; ".join(b["unavailable"] for b in bounds.values()),
              file=sys.stderr)
        _emit(args, "bounds.json", report)
        return EXIT_INVALID
    best = min(usable)
    g = gamma_auto(problem.N, best)
    report["gamma_auto"] = g
    report["gap_bound"] = gap_bound(penalty.epsilon, g, problem.N)
    report["epsilon"] = penalty.epsilon
    if args.distributed:
        local = {a.id: grad_inf_bound(a) for a in problem.agents}
        agreed = max_consensus(problem.graph, local)
        report["max_consensus_grad_bound"] = float(agreed[0])
    if problem.is_quadratic() and all(c.alpha > 0 for c in problem.costs):
        try:
            pt = solve_boxed_qp(problem)
            report["oracle_mu_max"] = pt.mu_max
            report["oracle_licq"] = licq_holds(pt, problem)
        except OracleError as exc:
            report["oracle_mu_max"] = None
            report["oracle_note"] = str(exc)
    _emit(args, "bounds.json", report)
    return EXIT_OK


def run_oracle(args) -> int:
    problem, cfg = load_problem(args)
    validate(problem)
    rho = float(args.rho if args.rho is not None else 1.0)
    penalty = _penalty(args, cfg) if _has_boxes(problem) else None
    try:
        x, pt, how = _oracle(problem, penalty, rho)
    except OracleError as exc:
        print(f"oracle failed: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    if pt is not None:
        report = pt.to_dict(problem)
        report["kkt_residual"] = kkt_residual(pt, problem).to_dict()
        report["licq"] = licq_holds(pt, problem)
    else:
        report = {"x_star": x, "cost": problem.total_cost(x)}
    report["method"] = how
    _emit(args, "oracle.json", report)
    return EXIT_OK


def run_check(args) -> int:
    from .checks import run_checks
    results = run_checks(range(args.seed, args.seed + args.seeds))
    for r in results:
        print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['check']} [seed {r['seed']}]: "
              f"{r['detail'].splitlines()[0]}")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        _write_json(args.out / "check.json", results)
    return EXIT_OK if all(r["passed"] for r in results) else 1


def _emit(args, name: str, report: dict) -> None:
    print(json.dumps(report, indent=2, sort_keys=True, default=_jsonable))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        _write_json(args.out / name, report)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handler = {"solve": run_solve, "bounds": run_bounds, "check": run_check, "oracle": run_oracle}[args.command]
    try:
        return handler(args)
    except (ProblemValidationError, LayoutError, ConfigError, BoundPreconditionError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
