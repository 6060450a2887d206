"""Problem definition: clustered agents, separable costs, weighted equalities, boxes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .graph import Graph, is_connected

RANK_RTOL = 1e-10


class ProblemValidationError(ValueError):
    """A problem violates a standing assumption (rank, connectivity, bounds)."""


# --------------------------------------------------------------------------
# cost families

@dataclass(frozen=True)
class QuadraticCost:
    alpha: float
    beta: float = 0.0
    gamma: float = 0.0

    kind = "quadratic"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"quadratic cost needs alpha >= 0, got {self.alpha}")

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return self.alpha * x * x + self.beta * x + self.gamma

    def grad(self, x):
        return 2.0 * self.alpha * np.asarray(x, dtype=float) + self.beta

    def max_abs_grad(self, lo: float, hi: float) -> float:
        # affine derivative: extremes sit at the endpoints
        return float(max(abs(self.grad(lo)), abs(self.grad(hi))))

    def to_dict(self) -> dict:
        return {"type": "quadratic", "alpha": self.alpha, "beta": self.beta, "gamma": self.gamma}


@dataclass(frozen=True)
class SmoothDeadzoneCost:
    """Zero on ``|x| <= halfwidth``, a quadratic blend of width ``blend``, then linear."""

    halfwidth: float
    blend: float

    kind = "smooth_deadzone"

    def __post_init__(self):
        if self.halfwidth <= 0 or self.blend <= 0:
            raise ValueError("smooth deadzone needs positive halfwidth and blend")

    def value(self, x):
        r = np.abs(np.asarray(x, dtype=float)) - self.halfwidth
        a = self.blend
        return np.where(r <= 0, 0.0, np.where(r <= a, r * r / (2 * a), r - a / 2))

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        r = np.abs(x) - self.halfwidth
        return np.sign(x) * np.clip(r / self.blend, 0.0, 1.0)

    def max_abs_grad(self, lo: float, hi: float) -> float:
        reach = max(abs(lo), abs(hi))
        return float(np.clip((reach - self.halfwidth) / self.blend, 0.0, 1.0))

    def to_dict(self) -> dict:
        return {"type": "smooth_deadzone", "halfwidth": self.halfwidth, "blend": self.blend}


CostFunction = QuadraticCost | SmoothDeadzoneCost


def cost_from_dict(d: Mapping) -> CostFunction:
    kind = d.get("type", "quadratic")
    if kind == "quadratic":
        return QuadraticCost(float(d["alpha"]), float(d.get("beta", 0.0)), float(d.get("gamma", 0.0)))
    if kind == "smooth_deadzone":
        return SmoothDeadzoneCost(float(d["halfwidth"]), float(d["blend"]))
    raise ValueError(f"unknown cost type {kind!r}")


# --------------------------------------------------------------------------
# problem structure

@dataclass(frozen=True)
class AgentSpec:
    """An agent (cluster) owning ``len(costs)`` scalar subagent variables.

    Missing bounds are stored as -inf / +inf.
    """

    id: int
    costs: tuple[CostFunction, ...]
    lower: tuple[float, ...] = None
    upper: tuple[float, ...] = None

    def __post_init__(self):
        n = len(self.costs)
        if n == 0:
            raise ValueError(f"agent {self.id} has no subagents")
        lo = (-math.inf,) * n if self.lower is None else tuple(
            -math.inf if v is None else float(v) for v in self.lower)
        hi = (math.inf,) * n if self.upper is None else tuple(
            math.inf if v is None else float(v) for v in self.upper)
        if len(lo) != n or len(hi) != n:
            raise ValueError(f"agent {self.id}: bound lists must have length {n}")
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "costs", tuple(self.costs))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def n(self) -> int:
        return len(self.costs)

    @property
    def lower_set(self) -> tuple[int, ...]:
        return tuple(l for l, v in enumerate(self.lower) if math.isfinite(v))

    @property
    def upper_set(self) -> tuple[int, ...]:
        return tuple(l for l, v in enumerate(self.upper) if math.isfinite(v))

    @property
    def fully_bounded(self) -> bool:
        return all(math.isfinite(a) and math.isfinite(b) for a, b in zip(self.lower, self.upper))


@dataclass(frozen=True)
class EqualityConstraint:
    """``sum_i weights[i] @ x^i == rhs``; agents absent from ``weights`` have a zero row."""

    weights: Mapping[int, tuple[float, ...]]
    rhs: float

    def __post_init__(self):
        w = {int(k): tuple(float(x) for x in np.atleast_1d(v)) for k, v in self.weights.items()}
        if not any(any(x != 0 for x in row) for row in w.values()):
            raise ValueError("equality constraint has no nonzero weight")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "rhs", float(self.rhs))

    def row(self, agent: AgentSpec) -> np.ndarray:
        r = self.weights.get(agent.id)
        if r is None:
            return np.zeros(agent.n)
        if len(r) != agent.n:
            raise ValueError(f"weight row for agent {agent.id} has length {len(r)}, expected {agent.n}")
        return np.array(r)

    def core(self) -> tuple[int, ...]:
        return tuple(sorted(i for i, r in self.weights.items() if any(x != 0 for x in r)))


@dataclass(frozen=True, eq=False)
class Problem:
    agents: tuple[AgentSpec, ...]
    constraints: tuple[EqualityConstraint, ...]
    graph: Graph
    name: str = ""

    def __post_init__(self):
        agents = tuple(sorted(self.agents, key=lambda a: a.id))
        object.__setattr__(self, "agents", agents)
        object.__setattr__(self, "constraints", tuple(self.constraints))
        ids = tuple(a.id for a in agents)
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate agent ids")
        if ids != self.graph.node_ids:
            raise ValueError(f"graph nodes {self.graph.node_ids} do not match agent ids {ids}")
        offsets = np.cumsum([0] + [a.n for a in agents])
        slices = {a.id: slice(int(offsets[k]), int(offsets[k + 1])) for k, a in enumerate(agents)}
        object.__setattr__(self, "_slices", slices)
        W = np.zeros((len(self.constraints), int(offsets[-1])))
        for k, c in enumerate(self.constraints):
            unknown = set(c.weights) - set(ids)
            if unknown:
                raise ValueError(f"constraint {k + 1} references unknown agents {sorted(unknown)}")
            for a in agents:
                W[k, slices[a.id]] = c.row(a)
        W.setflags(write=False)
        object.__setattr__(self, "_W", W)

    # sizes and stacked views -------------------------------------------------
    @property
    def N(self) -> int:
        return len(self.agents)

    @property
    def m(self) -> int:
        return self._W.shape[1]

    @property
    def p(self) -> int:
        return len(self.constraints)

    @property
    def W(self) -> np.ndarray:
        return self._W

    @property
    def b(self) -> np.ndarray:
        return np.array([c.rhs for c in self.constraints])

    @property
    def agent_ids(self) -> tuple[int, ...]:
        return tuple(a.id for a in self.agents)

    def agent(self, i: int) -> AgentSpec:
        for a in self.agents:
            if a.id == i:
                return a
        raise KeyError(i)

    def slice_of(self, i: int) -> slice:
        return self._slices[i]

    @property
    def lower(self) -> np.ndarray:
        return np.concatenate([a.lower for a in self.agents])

    @property
    def upper(self) -> np.ndarray:
        return np.concatenate([a.upper for a in self.agents])

    @property
    def costs(self) -> tuple[CostFunction, ...]:
        return tuple(c for a in self.agents for c in a.costs)

    def owner(self) -> np.ndarray:
        """Agent id owning each coordinate of the stacked ``x``."""
        return np.concatenate([[a.id] * a.n for a in self.agents])

    def core_set(self, k: int) -> tuple[int, ...]:
        """Agents with a nonzero weight row in constraint ``k`` (0-based)."""
        return self.constraints[k].core()

    def split(self, x) -> dict[int, np.ndarray]:
        x = np.asarray(x, dtype=float)
        return {a.id: x[self._slices[a.id]] for a in self.agents}

    def total_cost(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(sum(c.value(xi) for c, xi in zip(self.costs, x)))

    def with_costs(self, costs: Mapping[int, Sequence[CostFunction]], name: str | None = None) -> "Problem":
        """Copy with replaced cost lists for some agents (bounds and weights kept)."""
        agents = tuple(
            AgentSpec(a.id, tuple(costs[a.id]), a.lower, a.upper) if a.id in costs else a
            for a in self.agents)
        return Problem(agents, self.constraints, self.graph, self.name if name is None else name)

    def is_quadratic(self) -> bool:
        return all(isinstance(c, QuadraticCost) for c in self.costs)


@dataclass(frozen=True)
class GainConfig:
    rho: Mapping[int, float]
    beta: Mapping[int, float]

    def __post_init__(self):
        if any(r < 0 for r in self.rho.values()):
            raise ValueError("rho must be nonnegative")
        if any(b <= 0 for b in self.beta.values()):
            raise ValueError("beta must be positive")

    @classmethod
    def uniform(cls, problem: Problem, rho: float = 1.0, beta: float = 1.0) -> "GainConfig":
        return cls({i: float(rho) for i in problem.agent_ids},
                   {k: float(beta) for k in range(problem.p)})

    def rho_vector(self, problem: Problem) -> np.ndarray:
        return np.concatenate([[self.rho[a.id]] * a.n for a in problem.agents])


# --------------------------------------------------------------------------
# operations

@dataclass
class ValidationReport:
    rank: int
    p: int
    singular_values: np.ndarray
    connected: bool
    cores: list[tuple[int, ...]]
    equality_residual: float
    box_feasibility: str = "not verified"
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rank": self.rank, "p": self.p,
            "singular_values": self.singular_values.tolist(),
            "connected": self.connected,
            "cores": [list(c) for c in self.cores],
            "equality_residual": self.equality_residual,
            "box_feasibility": self.box_feasibility,
            "notes": list(self.notes),
        }


def validate(problem: Problem) -> ValidationReport:
    """Check the standing assumptions; raises ``ProblemValidationError`` on hard failures.

    Box feasibility is settled here only for quadratic problems, by asking
    the active-set oracle; otherwise it is reported as not verified.
    """
    for a in problem.agents:
        for l, (lo, hi) in enumerate(zip(a.lower, a.upper)):
            if not lo < hi:
                raise ProblemValidationError(
                    f"agent {a.id} subagent {l + 1}: lower bound {lo} is not below upper bound {hi}")
    W, b = problem.W, problem.b
    if problem.p:
        sv = np.linalg.svd(W, compute_uv=False)
        rank = int(np.sum(sv > RANK_RTOL * sv[0]))
    else:
        sv, rank = np.zeros(0), 0
    if rank < problem.p:
        raise ProblemValidationError(f"weight matrix has rank {rank} < {problem.p} rows")
    connected = is_connected(problem.graph)
    if not connected:
        raise ProblemValidationError("physical communication graph is disconnected")
    if problem.p:
        x_ls = np.linalg.lstsq(W, b, rcond=None)[0]
        resid = float(np.abs(W @ x_ls - b).max())
    else:
        resid = 0.0
    report = ValidationReport(rank, problem.p, sv, connected,
                              [problem.core_set(k) for k in range(problem.p)], resid)
    if resid > 1e-8 * (1 + np.abs(b).max(initial=0.0)):
        report.notes.append(f"least-squares equality residual {resid:g} is not small")
    has_boxes = bool(np.isfinite(problem.lower).any() or np.isfinite(problem.upper).any())
    if not has_boxes:
        report.box_feasibility = "no boxes"
    elif problem.is_quadratic() and all(c.alpha > 0 for c in problem.costs):
        from .oracle import OracleError, solve_boxed_qp
        try:
            solve_boxed_qp(problem)
            report.box_feasibility = "feasible"
        except OracleError as exc:
            report.box_feasibility = f"not verified ({exc})"
    return report


def _check_dim(agent: AgentSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (agent.n,):
        raise ValueError(f"agent {agent.id} expects {agent.n} values, got shape {x.shape}")
    return x


def cost_value(agent: AgentSpec, x) -> float:
    x = _check_dim(agent, x)
    return float(sum(c.value(xl) for c, xl in zip(agent.costs, x)))


def cost_grad(agent: AgentSpec, x) -> np.ndarray:
    x = _check_dim(agent, x)
    return np.array([float(c.grad(xl)) for c, xl in zip(agent.costs, x)])


def grad_inf_bound(agent: AgentSpec) -> float:
    """max over the agent's box of the sup-norm of its cost gradient."""
    if not agent.fully_bounded:
        raise ValueError(f"agent {agent.id} has an unbounded subagent; gradient bound undefined")
    return max(c.max_abs_grad(lo, hi) for c, lo, hi in zip(agent.costs, agent.lower, agent.upper))


class StackedCosts:
    """Vectorised value/gradient over the stacked decision vector."""

    def __init__(self, costs: Sequence[CostFunction]):
        costs = list(costs)
        self.m = len(costs)
        quad = [k for k, c in enumerate(costs) if isinstance(c, QuadraticCost)]
        dz = [k for k, c in enumerate(costs) if isinstance(c, SmoothDeadzoneCost)]
        if len(quad) + len(dz) != self.m:
            raise TypeError("unsupported cost family in stack")
        self.quad = np.array(quad, dtype=int)
        self.q_a = np.array([costs[k].alpha for k in quad])
        self.q_b = np.array([costs[k].beta for k in quad])
        self.q_c = np.array([costs[k].gamma for k in quad])
        self.dz = np.array(dz, dtype=int)
        self.d_c = np.array([costs[k].halfwidth for k in dz])
        self.d_a = np.array([costs[k].blend for k in dz])
        self.all_quadratic = not dz

    def grad(self, x: np.ndarray) -> np.ndarray:
        if self.all_quadratic:
            return 2.0 * self.q_a * x + self.q_b
        g = np.empty_like(x)
        xq = x[self.quad]
        g[self.quad] = 2.0 * self.q_a * xq + self.q_b
        xd = x[self.dz]
        g[self.dz] = np.sign(xd) * np.clip((np.abs(xd) - self.d_c) / self.d_a, 0.0, 1.0)
        return g

    def value(self, x: np.ndarray) -> float:
        xq = x[self.quad]
        total = float(np.sum(self.q_a * xq * xq + self.q_b * xq + self.q_c))
        if self.dz.size:
            r = np.abs(x[self.dz]) - self.d_c
            a = self.d_a
            total += float(np.sum(np.where(r <= 0, 0.0, np.where(r <= a, r * r / (2 * a), r - a / 2))))
        return total


def split_b(strategy: str, core: Sequence[int], cluster: Sequence[int], b: float,
            single: int | None = None, custom: Mapping[int, float] | None = None) -> dict[int, float]:
    """Distribute the right-hand side ``b`` over the cluster members.

    Strategies: ``equal_core`` (equal shares on the core, zero on helpers),
    ``single`` (everything on node ``single``) and ``custom`` (validated map).
    The last member absorbs rounding so the shares add up to ``b`` exactly
    when summed in cluster order.
    """
    cluster = sorted(int(c) for c in cluster)
    core = sorted(int(c) for c in core)
    if not set(core) <= set(cluster):
        raise ValueError("core must be a subset of the cluster")
    b = float(b)
    if strategy == "equal_core":
        share = b / len(core)
        out = {l: (share if l in core else 0.0) for l in cluster}
        absorb = core[-1]
    elif strategy == "single":
        if single not in cluster:
            raise ValueError(f"node {single} is not in the cluster")
        out = {l: (b if l == single else 0.0) for l in cluster}
        absorb = single
    elif strategy == "custom":
        if custom is None or set(int(k) for k in custom) != set(cluster):
            raise ValueError("custom split must give a share for every cluster member")
        out = {l: float(custom[l]) for l in cluster}
        if abs(math.fsum(out.values()) - b) > 1e-12 * abs(b) + (0.0 if b else 1e-300):
            raise ValueError(f"custom split sums to {math.fsum(out.values())}, expected {b}")
        absorb = cluster[-1]
    else:
        raise ValueError(f"unknown split strategy {strategy!r}")
    return _compensate(out, b, absorb, cluster)


def _compensate(out: dict[int, float], b: float, absorb: int, order: list[int]) -> dict[int, float]:
    def total():
        s = 0.0
        for l in order:
            s += out[l]
        return s
    for _ in range(8):
        err = b - total()
        if err == 0.0:
            return out
        out[absorb] += err
    # residual one-ulp oscillation; walk the absorbing share toward b
    for _ in range(64):
        if total() == b:
            return out
        out[absorb] = math.nextafter(out[absorb], math.inf if b > total() else -math.inf)
    raise ArithmeticError("could not make the split shares sum exactly to b")
