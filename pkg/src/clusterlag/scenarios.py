"""Built-in problem instances, seeded random generators and the JSON problem format."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Mapping

import numpy as np

from .graph import Graph, is_connected
from .model import AgentSpec, EqualityConstraint, Problem, QuadraticCost, SmoothDeadzoneCost, cost_from_dict

# (alpha, beta, gamma, lower, upper) per generator bus of the 118-bus dispatch data
BUS_TABLE: dict[int, tuple[float, float, float, float, float]] = {
    4: (0.0696629, 26.24382, 31.67, 5.0, 30.0),
    10: (0.010875, 12.8875, 6.78, 150.0, 300.0),
    18: (0.0128, 17.82, 10.15, 25.0, 100.0),
    26: (0.003, 10.76, 32.96, 100.0, 350.0),
    54: (0.0024014, 12.32989, 28.0, 50.0, 250.0),
    69: (0.010875, 12.8875, 6.78, 80.0, 300.0),
}

# which generator type each subagent of the six dispatch agents uses
DISPATCH_BUSES: dict[int, tuple[int, ...]] = {
    1: (4, 18),
    2: (4,),
    3: (18, 54, 4),
    4: (4, 18, 54),
    5: (26, 10),
    6: (69,),
}

DISPATCH_EDGES = [(1, 2), (2, 3), (3, 4), (1, 4), (4, 5), (5, 6)]
DISPATCH_DEMAND = (450.0, 700.0)

SENSOR_TARGETS = (
    (12, 11, 9, 3, 2, -1, -2, -8, -11, -13),
    (24, 22, 17, 15, 13, 8, 7, 3, -2, -4),
)
SENSOR_GROUPS = {1: (0, 1, 2), 3: (3, 4, 5, 6), 5: (7, 8, 9)}
SENSOR_SPACING = 5.0
SENSOR_SWITCH_TIME = 100.0


def bus_cost(bus: int) -> QuadraticCost:
    a, b, g, _, _ = BUS_TABLE[bus]
    return QuadraticCost(a, b, g)


def example1() -> Problem:
    """Six-agent economic dispatch with two demand constraints."""
    agents = []
    for i, buses in DISPATCH_BUSES.items():
        agents.append(AgentSpec(i, tuple(bus_cost(b) for b in buses),
                                tuple(BUS_TABLE[b][3] for b in buses),
                                tuple(BUS_TABLE[b][4] for b in buses)))
    c1 = EqualityConstraint({1: (1, 1), 2: (1,), 3: (0.5, 0.5, 0.5), 4: (1, 1, 1)}, DISPATCH_DEMAND[0])
    c2 = EqualityConstraint({3: (0.5, 0.5, 0.5), 5: (1, 1), 6: (1,)}, DISPATCH_DEMAND[1])
    g = Graph.from_edges(DISPATCH_BUSES, DISPATCH_EDGES)
    return Problem(tuple(agents), (c1, c2), g, name="example1")


def _sensor_costs(targets) -> dict[int, list]:
    costs = {}
    for i in range(1, 6):
        if i in SENSOR_GROUPS:
            p = np.array([targets[j] for j in SENSOR_GROUPS[i]], dtype=float)
            # sum_j (x - p_j)^2 expanded
            pos = QuadraticCost(float(len(p)), float(-2 * p.sum()), float((p ** 2).sum()))
        else:
            pos = QuadraticCost(0.0)
        costs[i] = [pos] + ([QuadraticCost(0.0)] if i < 5 else [])
    return costs


def example2(phase: int = 0) -> Problem:
    """Sensor/relay deployment on a line; neighbours at most 5 apart, via nonnegative slacks."""
    costs = _sensor_costs(SENSOR_TARGETS[phase])
    agents = []
    for i in range(1, 6):
        if i < 5:
            agents.append(AgentSpec(i, tuple(costs[i]), (None, 0.0), (None, None)))
        else:
            agents.append(AgentSpec(i, tuple(costs[i])))
    cons = []
    for j in range(1, 5):
        w = {j: (1.0, 1.0), j + 1: (-1.0, 0.0) if j + 1 < 5 else (-1.0,)}
        cons.append(EqualityConstraint(w, SENSOR_SPACING))
    g = Graph.from_edges(range(1, 6), [(i, i + 1) for i in range(1, 5)])
    return Problem(tuple(agents), tuple(cons), g, name=f"example2-phase{phase + 1}")


def example2_phases() -> list[tuple[float, Problem]]:
    """The cost swap at the target switch time."""
    return [(SENSOR_SWITCH_TIME, example2(1))]


def appendix_b(halfwidth: float = 2.0, blend: float = 0.01) -> Problem:
    """Two agents with flat-bottomed convex costs and ``x1 + x2 = 2``."""
    agents = tuple(AgentSpec(i, (SmoothDeadzoneCost(halfwidth, blend),)) for i in (1, 2))
    g = Graph.from_edges((1, 2), [(1, 2)])
    return Problem(agents, (EqualityConstraint({1: (1.0,), 2: (1.0,)}, 2.0),), g, name="appendixB")


def _uniform_open(rng, lo, hi, size=None):
    # samples from (lo, hi]
    return hi - (hi - lo) * rng.random(size)


def table1(seed: int, n_agents: int = 10) -> Problem:
    """Random single-constraint instance: scalar agents, positive weights, unit boxes."""
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        alpha = _uniform_open(rng, 0, 1, n_agents)
        beta = _uniform_open(rng, 0, 3, n_agents)
        gamma = _uniform_open(rng, 0, 4, n_agents)
        w = _uniform_open(rng, 0, 2, n_agents)
        b = float(_uniform_open(rng, 0, 4))
        if b < w.sum():
            break
    else:  # pragma: no cover - vanishingly unlikely
        raise RuntimeError("could not draw a feasible instance")
    agents = tuple(AgentSpec(i + 1, (QuadraticCost(alpha[i], beta[i], gamma[i]),), (0.0,), (1.0,))
                   for i in range(n_agents))
    con = EqualityConstraint({i + 1: (w[i],) for i in range(n_agents)}, b)
    g = Graph.from_edges(range(1, n_agents + 1), [(i, i % n_agents + 1) for i in range(1, n_agents + 1)])
    return Problem(agents, (con,), g, name=f"table1-seed{seed}")


def random_graph(rng, nodes, extra: float = 0.3) -> Graph:
    """Random spanning tree plus each remaining pair with probability ``extra``."""
    nodes = list(nodes)
    order = [nodes[j] for j in rng.permutation(len(nodes))]
    edges = set()
    for a in range(1, len(order)):
        parent = order[int(rng.integers(a))]
        edges.add(tuple(sorted((order[a], parent))))
    for a in range(len(nodes)):
        for c in range(a + 1, len(nodes)):
            if rng.random() < extra:
                edges.add((nodes[a], nodes[c]))
    g = Graph.from_edges(nodes, sorted(edges))
    assert is_connected(g)
    return g


def random_quadratic(seed: int, n_agents: tuple[int, int] = (2, 5), n_sub: tuple[int, int] = (1, 3),
                     p: tuple[int, int] = (1, 2), alpha: tuple[float, float] = (0.1, 1.0),
                     beta: tuple[float, float] = (-3.0, 3.0), boxed: bool | float = True,
                     max_vars: int | None = None, weight_range: tuple[float, float] = (0.2, 2.0),
                     density: float = 0.7, box_halfwidth: tuple[float, float] = (0.3, 1.5)) -> Problem:
    """Seeded random strongly convex instance with a full-rank W and a feasible box.

    ``boxed`` may be a probability of boxing each coordinate.  Right-hand
    sides come from a random interior point so the instance is feasible.
    """
    rng = np.random.default_rng(seed)
    while True:
        N = int(rng.integers(n_agents[0], n_agents[1] + 1))
        sizes = [int(rng.integers(n_sub[0], n_sub[1] + 1)) for _ in range(N)]
        m = sum(sizes)
        if max_vars is not None and m > max_vars:
            continue
        pk = int(rng.integers(p[0], p[1] + 1))
        if pk > m:
            continue
        W = np.where(rng.random((pk, m)) < density,
                     rng.uniform(*weight_range, (pk, m)) * rng.choice([-1.0, 1.0], (pk, m)), 0.0)
        if np.linalg.matrix_rank(W) == pk and np.all(np.abs(W).sum(axis=1) > 0):
            break
    centre = rng.uniform(-1, 1, m)
    prob_box = 1.0 if boxed is True else (0.0 if boxed is False else float(boxed))
    has_box = rng.random(m) < prob_box
    half = rng.uniform(*box_halfwidth, m)
    lo = np.where(has_box, centre - half, -np.inf)
    hi = np.where(has_box, centre + half, np.inf)
    x_feas = centre + np.where(has_box, rng.uniform(-half, half), 0.0)
    b = W @ x_feas
    a = rng.uniform(*alpha, m)
    bb = rng.uniform(*beta, m)
    agents, pos = [], 0
    for i, n in enumerate(sizes):
        sl = slice(pos, pos + n)
        agents.append(AgentSpec(i + 1, tuple(QuadraticCost(a[j], bb[j]) for j in range(pos, pos + n)),
                                tuple(lo[sl]), tuple(hi[sl])))
        pos += n
    cons = []
    offsets = np.cumsum([0] + sizes)
    for k in range(pk):
        w = {i + 1: tuple(W[k, offsets[i]:offsets[i + 1]]) for i in range(N)
             if np.any(W[k, offsets[i]:offsets[i + 1]] != 0)}
        cons.append(EqualityConstraint(w, b[k]))
    g = random_graph(rng, range(1, N + 1))
    return Problem(tuple(agents), tuple(cons), g, name=f"random-seed{seed}")


BUILTINS = {"example1", "example2", "appendixB", "table1"}


def builtin(name: str, seed: int | None = None) -> Problem:
    if name == "example1":
        return example1()
    if name == "example2":
        return example2(0)
    if name == "appendixB":
        return appendix_b()
    if name == "table1":
        if seed is None:
            raise ValueError("the table1 scenario is random and needs --seed")
        return table1(seed)
    raise ValueError(f"unknown scenario {name!r}; choose from {sorted(BUILTINS)}")


# --------------------------------------------------------------------------
# JSON problem files

def _bound_out(v: float):
    return None if math.isinf(v) else v


def problem_to_dict(problem: Problem) -> dict:
    return {
        "name": problem.name,
        "agents": [{"id": a.id, "costs": [c.to_dict() for c in a.costs],
                    "lower": [_bound_out(v) for v in a.lower], "upper": [_bound_out(v) for v in a.upper]}
                   for a in problem.agents],
        "constraints": [{"weights": {str(i): list(r) for i, r in c.weights.items()}, "b": c.rhs}
                        for c in problem.constraints],
        "graph": {"edges": [[i, j, w] for i, j, w in problem.graph.edges()]},
    }


def problem_from_dict(d: Mapping) -> Problem:
    agents = []
    for a in d["agents"]:
        n = len(a["costs"])
        agents.append(AgentSpec(int(a["id"]), tuple(cost_from_dict(c) for c in a["costs"]),
                                tuple(a.get("lower") or [None] * n), tuple(a.get("upper") or [None] * n)))
    cons = [EqualityConstraint({int(k): tuple(v) for k, v in c["weights"].items()}, float(c["b"]))
            for c in d["constraints"]]
    ids = sorted(a.id for a in agents)
    g = Graph.from_edges(ids, [tuple(e) for e in d.get("graph", {}).get("edges", [])])
    return Problem(tuple(agents), tuple(cons), g, name=d.get("name", ""))


def load_config(path) -> dict:
    return json.loads(Path(path).read_text())


def save_problem(problem: Problem, path, **extra) -> None:
    d = problem_to_dict(problem)
    d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2) + "\n")
