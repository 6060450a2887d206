"""Continuous-time solvers: the cluster-based distributed flow and the centralized
augmented-Lagrangian saddle flow, plus fixed-step RK4 integration.

State layout of the distributed flow (one flat vector): every ``y_k`` block
by ascending constraint ``k``, then every ``v_k`` block in the same order,
then every ``x^i`` block by ascending agent id.  Inside a block the slots
follow the ascending node ids of the cluster.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .graph import Graph, GraphError, connect_cluster, disagreement, is_connected
from .model import GainConfig, Problem, StackedCosts, split_b
from .penalty import PenaltyConfig, penalty_grad_vector, resolve_penalty
from ._kernels import AVAILABLE as _COMPILED, LinearForm

DEFAULT_STEP = 1e-3
DEFAULT_TOL = 1e-6


class DivergenceError(RuntimeError):
    def __init__(self, t: float, message: str = ""):
        super().__init__(message or f"state became non-finite at t = {t:g}")
        self.t = t


class LayoutError(ValueError):
    """A cluster layout breaks connectivity, coverage or the rhs split."""


# --------------------------------------------------------------------------
# cluster layouts

@dataclass(frozen=True, eq=False)
class ClusterLayout:
    """Communication subgraph for one equality constraint (``k`` is 0-based)."""

    k: int
    nodes: tuple[int, ...]
    adjacency: np.ndarray
    bbar: Mapping[int, float]
    beta: float = 1.0

    def __post_init__(self):
        nodes = tuple(int(n) for n in self.nodes)
        if list(nodes) != sorted(set(nodes)):
            raise LayoutError(f"cluster {self.k + 1}: nodes must be strictly increasing")
        A = np.array(self.adjacency, dtype=float)
        A.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "adjacency", A)
        object.__setattr__(self, "bbar", {int(k): float(v) for k, v in self.bbar.items()})
        if not self.beta > 0:
            raise LayoutError("beta must be positive")
        if set(self.bbar) != set(nodes):
            raise LayoutError(f"cluster {self.k + 1}: rhs split must cover exactly the cluster nodes")
        if not is_connected(self.graph):
            raise LayoutError(f"cluster {self.k + 1} subgraph on {nodes} is not connected")

    @property
    def graph(self) -> Graph:
        return Graph(self.nodes, self.adjacency)

    @property
    def size(self) -> int:
        return len(self.nodes)

    def slot(self, node: int) -> int:
        return self.nodes.index(node)

    def laplacian(self) -> np.ndarray:
        A = self.adjacency
        return np.diag(A.sum(axis=1)) - A

    def same_topology(self, other: "ClusterLayout") -> bool:
        return self.nodes == other.nodes and np.array_equal(self.adjacency, other.adjacency)


def build_layouts(problem: Problem, beta: Mapping[int, float] | float = 1.0, split: str = "equal_core",
                  full_graph: bool = False, clusters: Mapping[int, Sequence[int]] | None = None,
                  edges: Mapping[int, Sequence[Sequence]] | None = None) -> list[ClusterLayout]:
    """One layout per constraint.

    Node sets come from ``connect_cluster`` on each core unless ``full_graph``
    (every agent in every cluster) or an explicit ``clusters[k]`` override is
    given.  Edges are those of the physical graph induced on the node set,
    unless ``edges[k]`` lists a custom edge set (which must stay inside the
    physical graph).
    """
    layouts = []
    g = problem.graph
    for k in range(problem.p):
        core = problem.core_set(k)
        if clusters and k in clusters:
            nodes = tuple(sorted(int(n) for n in clusters[k]))
        elif full_graph:
            nodes = g.node_ids
        else:
            nodes = connect_cluster(g, core)
        if not set(core) <= set(nodes):
            raise LayoutError(f"cluster {k + 1} misses core agents {sorted(set(core) - set(nodes))}")
        sub = g.induced(nodes)
        if edges and k in edges:
            custom = Graph.from_edges(nodes, edges[k])
            for i, j, _ in custom.edges():
                if g.weight(i, j) <= 0:
                    raise LayoutError(f"cluster {k + 1}: edge ({i}, {j}) is not in the physical graph")
            sub = custom
        bk = beta[k] if isinstance(beta, Mapping) else float(beta)
        bbar = split_b(split, core, nodes, problem.b[k])
        layouts.append(ClusterLayout(k, nodes, sub.adjacency, bbar, bk))
    return layouts


def communication_counts(problem: Problem, layouts: Sequence[ClusterLayout]) -> dict[int, int]:
    """Number of dual-variable copies each agent maintains and broadcasts (``|T^i|``)."""
    return {i: sum(i in lay.nodes for lay in layouts) for i in problem.agent_ids}


def memberships(problem: Problem, layouts: Sequence[ClusterLayout]) -> dict[int, list[int]]:
    return {i: [lay.k for lay in layouts if i in lay.nodes] for i in problem.agent_ids}


# --------------------------------------------------------------------------
# state

@dataclass(frozen=True)
class StateLayout:
    clusters: tuple[tuple[int, ...], ...]
    m: int

    @classmethod
    def of(cls, layouts: Sequence[ClusterLayout], m: int) -> "StateLayout":
        return cls(tuple(lay.nodes for lay in layouts), m)

    @property
    def sizes(self) -> list[int]:
        return [len(c) for c in self.clusters]

    @property
    def slots(self) -> int:
        return sum(self.sizes)

    @property
    def dim(self) -> int:
        return 2 * self.slots + self.m

    def _offsets(self):
        return np.cumsum([0] + self.sizes)

    def y_slice(self, k: int) -> slice:
        o = self._offsets()
        return slice(int(o[k]), int(o[k + 1]))

    def v_slice(self, k: int) -> slice:
        o = self._offsets() + self.slots
        return slice(int(o[k]), int(o[k + 1]))

    @property
    def x_slice(self) -> slice:
        return slice(2 * self.slots, self.dim)

    def pack(self, y: Sequence, v: Sequence, x) -> np.ndarray:
        parts = [np.asarray(b, dtype=float) for b in y] + [np.asarray(b, dtype=float) for b in v]
        return np.concatenate(parts + [np.asarray(x, dtype=float)])

    def columns(self, problem: Problem) -> list[str]:
        cols = [f"y[{k + 1}][{n}]" for k, c in enumerate(self.clusters) for n in c]
        cols += [f"v[{k + 1}][{n}]" for k, c in enumerate(self.clusters) for n in c]
        cols += [f"x[{a.id}][{l + 1}]" for a in problem.agents for l in range(a.n)]
        return cols


@dataclass
class AlgorithmState:
    t: float
    vec: np.ndarray
    layout: StateLayout

    def y(self, k: int) -> np.ndarray:
        return self.vec[self.layout.y_slice(k)]

    def v(self, k: int) -> np.ndarray:
        return self.vec[self.layout.v_slice(k)]

    @property
    def x(self) -> np.ndarray:
        return self.vec[self.layout.x_slice]


def init_state(problem: Problem, layouts: Sequence[ClusterLayout], x0=None, v0=None,
               y0=None) -> AlgorithmState:
    """Initial state; ``y`` defaults to zero so every cluster sum of ``y`` starts at zero."""
    sl = StateLayout.of(layouts, problem.m)
    x = np.zeros(problem.m) if x0 is None else np.array(x0, dtype=float)
    if x.shape != (problem.m,):
        raise ValueError(f"x0 must have {problem.m} entries, got shape {x.shape}")
    y = [np.zeros(n) for n in sl.sizes] if y0 is None else [np.array(b, dtype=float) for b in y0]
    v = [np.zeros(n) for n in sl.sizes] if v0 is None else [np.array(b, dtype=float) for b in v0]
    for k, (yb, vb, n) in enumerate(zip(y, v, sl.sizes)):
        if yb.shape != (n,) or vb.shape != (n,):
            raise ValueError(f"cluster {k + 1}: y0/v0 blocks must have length {n}")
        if abs(math.fsum(yb)) > 1e-12 * (1.0 + np.abs(yb).max(initial=0.0)):
            raise ValueError(f"cluster {k + 1}: initial y must sum to zero (got {math.fsum(yb):g})")
    return AlgorithmState(0.0, sl.pack(y, v, x), sl)


def reindex(vec: np.ndarray, old: StateLayout, new: StateLayout) -> np.ndarray:
    """Carry a state across a topology change by node id.

    Entering nodes start at zero.  A departing node's ``v`` is dropped and
    its ``y`` is handed to the smallest-id node that stays, which keeps every
    cluster sum of ``y`` unchanged.
    """
    if old == new:
        return vec.copy()
    if len(old.clusters) != len(new.clusters) or old.m != new.m:
        raise LayoutError("layouts differ in constraint count or decision size")
    ys, vs = [], []
    for k, (before, after) in enumerate(zip(old.clusters, new.clusters)):
        yk_old = vec[old.y_slice(k)]
        vk_old = vec[old.v_slice(k)]
        pos = {n: a for a, n in enumerate(before)}
        yk = np.array([yk_old[pos[n]] if n in pos else 0.0 for n in after])
        vk = np.array([vk_old[pos[n]] if n in pos else 0.0 for n in after])
        stay = [n for n in after if n in pos]
        leaving = [n for n in before if n not in set(after)]
        if leaving:
            heir = after.index(stay[0]) if stay else 0
            yk[heir] += sum(yk_old[pos[n]] for n in leaving)
        ys.append(yk)
        vs.append(vk)
    return new.pack(ys, vs, vec[old.x_slice])


# --------------------------------------------------------------------------
# distributed flow

def _incidence(problem: Problem, layouts: Sequence[ClusterLayout]):
    """Slot-by-coordinate weight matrix Psi and the stacked rhs shares."""
    S = sum(lay.size for lay in layouts)
    Psi = np.zeros((S, problem.m))
    bbar = np.zeros(S)
    r = 0
    for lay in layouts:
        if not set(problem.core_set(lay.k)) <= set(lay.nodes):
            raise LayoutError(f"cluster {lay.k + 1} does not contain its core agents")
        for node in lay.nodes:
            sl = problem.slice_of(node)
            Psi[r, sl] = problem.W[lay.k, sl]
            bbar[r] = lay.bbar[node]
            r += 1
    return Psi, bbar


class DistributedSystem:
    """The distributed flow compiled to ``ds = M s + c - P * grad(x)``.

    ``grad`` is the (optionally penalised) separable cost gradient and ``P``
    is ``1 + rho^i`` on the x coordinates.  The matrix form keeps the same
    sparsity as the per-node equations: a node's derivative only mixes its
    own variables with the ``v`` of its cluster neighbours.
    """

    def __init__(self, problem: Problem, layouts: Sequence[ClusterLayout], gains: GainConfig,
                 use_penalized: bool = False, penalty: PenaltyConfig | None = None):
        if len(layouts) != problem.p or [lay.k for lay in layouts] != list(range(problem.p)):
            raise LayoutError("need exactly one layout per constraint, in order")
        self.problem = problem
        self.layouts = list(layouts)
        self.gains = gains
        self.use_penalized = use_penalized
        self.penalty = None
        self.multiplier_bound = None
        if use_penalized:
            self.penalty, self.multiplier_bound = resolve_penalty(problem, penalty or PenaltyConfig())
        self.state_layout = StateLayout.of(layouts, problem.m)
        self._compile()

    def _compile(self):
        p, layouts = self.problem, self.layouts
        S, m = self.state_layout.slots, p.m
        Psi, bbar = _incidence(p, layouts)
        Lb = np.zeros((S, S))
        r = 0
        for lay in layouts:
            n = lay.size
            Lb[r:r + n, r:r + n] = lay.beta * lay.laplacian()
            r += n
        rho = self.gains.rho_vector(p)
        M = np.zeros((2 * S + m, 2 * S + m))
        Y, V, X = slice(0, S), slice(S, 2 * S), slice(2 * S, 2 * S + m)
        M[Y, V] = Lb
        M[V, Y] = -np.eye(S)
        M[V, V] = -Lb
        M[V, X] = Psi
        M[X, Y] = rho[:, None] * Psi.T
        M[X, V] = -(1.0 + rho)[:, None] * Psi.T
        M[X, X] = -rho[:, None] * (Psi.T @ Psi)
        c = np.zeros(2 * S + m)
        c[V] = -bbar
        c[X] = rho * (Psi.T @ bbar)
        self.Psi, self.bbar, self.Lb, self.M, self.c = Psi, bbar, Lb, M, c
        self._scale = 1.0 + rho
        self._x0 = 2 * S
        self._costs = StackedCosts(p.costs)
        if self.use_penalized:
            self._lo, self._hi = self.penalty.effective_bounds(p.lower, p.upper)
            self._eps, self._gamma = self.penalty.epsilon, self.penalty.gamma_value()

    def grad(self, x: np.ndarray) -> np.ndarray:
        g = self._costs.grad(x)
        if self.use_penalized:
            g = g + penalty_grad_vector(x, self._lo, self._hi, self._eps, self._gamma)
        return g

    def linear_form(self) -> LinearForm:
        if self.use_penalized:
            return LinearForm(self.M, self.c, self._x0, self._scale, self._costs, self.penalty,
                              self._lo, self._hi)
        return LinearForm(self.M, self.c, self._x0, self._scale, self._costs)

    def __call__(self, t: float, s: np.ndarray) -> np.ndarray:
        ds = self.M @ s
        ds += self.c
        ds[self._x0:] -= self._scale * self.grad(s[self._x0:])
        return ds

    def rebuild(self, layouts: Sequence[ClusterLayout] | None = None,
                problem: Problem | None = None) -> "DistributedSystem":
        penalty = self.penalty if self.penalty is not None else None
        return DistributedSystem(problem or self.problem, layouts or self.layouts, self.gains,
                                 self.use_penalized, penalty)

    def residuals(self, s: np.ndarray) -> dict:
        sl = self.state_layout
        x = s[sl.x_slice]
        p = self.problem
        eq = float(np.abs(p.W @ x - p.b).max()) if p.p else 0.0
        cons = max((disagreement(s[sl.v_slice(k)]) for k in range(p.p)), default=0.0)
        xdot = self(0.0, s)[sl.x_slice]
        return {"equality": eq, "consensus": cons, "stationarity": float(np.abs(xdot).max())}

    def stiffness(self) -> float:
        """Crude bound on the Jacobian spectral radius, for picking a step."""
        lin = float(np.linalg.norm(self.M, 2))
        curv = _curvature_bound(self.problem, self.penalty if self.use_penalized else None)
        return lin + float(self._scale.max()) * curv


def _curvature_bound(problem: Problem, penalty: PenaltyConfig | None) -> float:
    curv = 0.0
    for c in problem.costs:
        curv = max(curv, 2 * c.alpha if c.kind == "quadratic" else 1.0 / c.blend)
    if penalty is not None:
        curv += penalty.gamma_value() / penalty.epsilon
    return curv


def suggest_step(system, safety: float = 2.0, cap: float = DEFAULT_STEP) -> float:
    """Largest step (at most ``cap``) keeping ``h * stiffness`` under ``safety``.

    RK4's real stability interval reaches about 2.78.
    """
    return min(cap, safety / system.stiffness())


def stable_epsilon(system, h: float = DEFAULT_STEP, safety: float = 2.0) -> float:
    """Smallest penalty smoothing width for which ``suggest_step`` still allows ``h``.

    ``system`` must use penalised costs; only its penalty weight is read.
    """
    pen = system.penalty
    if pen is None:
        raise ValueError("system does not use penalised costs")
    scale = float(system._scale.max()) if isinstance(system, DistributedSystem) else 1.0
    gamma = pen.gamma_value()
    rest = system.stiffness() - scale * gamma / pen.epsilon
    budget = safety / h - rest
    if budget <= 0:
        raise ValueError(f"step {h} is too large even without the penalty")
    return scale * gamma / budget


def distributed_rhs(state: AlgorithmState, problem: Problem, layouts: Sequence[ClusterLayout],
                    gains: GainConfig, use_penalized: bool = False,
                    penalty: PenaltyConfig | None = None) -> np.ndarray:
    return DistributedSystem(problem, layouts, gains, use_penalized, penalty)(state.t, state.vec)


def distributed_rhs_nodewise(state: AlgorithmState, problem: Problem, layouts: Sequence[ClusterLayout],
                             gains: GainConfig, use_penalized: bool = False,
                             penalty: PenaltyConfig | None = None) -> np.ndarray:
    """Per-node evaluation of the distributed update, one agent at a time.

    Each node reads only its own variables and the ``v`` of its neighbours
    inside each cluster it belongs to.  Slower than ``DistributedSystem`` and
    kept as an independent statement of the same equations.
    """
    from .model import cost_grad
    from .penalty import penalized_grad

    if use_penalized:
        penalty, _ = resolve_penalty(problem, penalty or PenaltyConfig())
    sl = state.layout
    out = np.zeros_like(state.vec)
    lay_of = {lay.k: lay for lay in layouts}
    for lay in layouts:
        k = lay.k
        yk, vk = state.y(k), state.v(k)
        dy, dv = out[sl.y_slice(k)], out[sl.v_slice(k)]
        for a, l in enumerate(lay.nodes):
            coupling = 0.0
            for b, j in enumerate(lay.nodes):
                if lay.adjacency[a, b] > 0:
                    coupling += lay.adjacency[a, b] * (vk[a] - vk[b])
            coupling *= lay.beta
            w_lk = problem.W[k, problem.slice_of(l)]
            x_l = state.x[problem.slice_of(l)]
            dy[a] = coupling
            dv[a] = (w_lk @ x_l - lay.bbar[l]) - coupling - yk[a]
    dx = out[sl.x_slice]
    for agent in problem.agents:
        i, si = agent.id, problem.slice_of(agent.id)
        xi = state.x[si]
        rho = gains.rho[i]
        g = penalized_grad(agent, xi, penalty) if use_penalized else cost_grad(agent, xi)
        acc = -(1 + rho) * g
        for k, lay in lay_of.items():
            if i not in lay.nodes:
                continue
            a = lay.slot(i)
            w = problem.W[k, si]
            acc = acc - rho * w * (w @ xi - lay.bbar[i]) + rho * w * state.y(k)[a] \
                - (1 + rho) * w * state.v(k)[a]
        dx[si] = acc
    return out


# --------------------------------------------------------------------------
# centralized flow

class CentralizedSystem:
    """Augmented-Lagrangian saddle flow on the stacked state ``[nu; x]``."""

    def __init__(self, problem: Problem, rho: float = 1.0, use_penalized: bool = False,
                 penalty: PenaltyConfig | None = None):
        self.problem = problem
        self.rho = float(rho)
        self.use_penalized = use_penalized
        self.penalty = None
        if use_penalized:
            self.penalty, self.multiplier_bound = resolve_penalty(problem, penalty or PenaltyConfig())
        self._W, self._b = problem.W, problem.b
        self._costs = StackedCosts(problem.costs)
        if use_penalized:
            self._lo, self._hi = self.penalty.effective_bounds(problem.lower, problem.upper)
        self.p, self.m = problem.p, problem.m

    def grad(self, x):
        g = self._costs.grad(x)
        if self.use_penalized:
            g = g + penalty_grad_vector(x, self._lo, self._hi, self.penalty.epsilon,
                                        self.penalty.gamma_value())
        return g

    def split(self, s):
        return s[:self.p], s[self.p:]

    def linear_form(self) -> LinearForm:
        p, m, W, b = self.p, self.m, self._W, self._b
        M = np.zeros((p + m, p + m))
        M[:p, p:] = W
        M[p:, :p] = -W.T
        M[p:, p:] = -self.rho * (W.T @ W)
        c = np.concatenate([-b, self.rho * (W.T @ b)])
        if self.use_penalized:
            return LinearForm(M, c, p, 1.0, self._costs, self.penalty, self._lo, self._hi)
        return LinearForm(M, c, p, 1.0, self._costs)

    def __call__(self, t, s):
        nu, x = s[:self.p], s[self.p:]
        r = self._W @ x - self._b
        dx = -self.grad(x) - self._W.T @ (nu + self.rho * r)
        return np.concatenate([r, dx])

    def residuals(self, s):
        d = self(0.0, s)
        eq = float(np.abs(d[:self.p]).max()) if self.p else 0.0
        return {"equality": eq, "consensus": 0.0, "stationarity": float(np.abs(d[self.p:]).max())}

    def stiffness(self) -> float:
        WtW = self._W.T @ self._W
        lin = float(np.linalg.norm(self._W, 2)) + self.rho * float(np.linalg.norm(WtW, 2))
        return lin + _curvature_bound(self.problem, self.penalty if self.use_penalized else None)


def centralized_rhs(nu, x, problem: Problem, rho: float = 1.0, use_penalized: bool = False,
                    penalty: PenaltyConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    sys_ = CentralizedSystem(problem, rho, use_penalized, penalty)
    d = sys_(0.0, np.concatenate([np.asarray(nu, dtype=float), np.asarray(x, dtype=float)]))
    return d[:problem.p], d[problem.p:]


# --------------------------------------------------------------------------
# integration

def _rk4(f, t, y, h):
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + (0.5 * h) * k1)
    k3 = f(t + 0.5 * h, y + (0.5 * h) * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)


def rk4_step(rhs: Callable, s, h: float):
    """One classical RK4 step; ``s`` is an ``AlgorithmState`` or a ``(t, y)`` pair."""
    if isinstance(s, AlgorithmState):
        return AlgorithmState(s.t + h, _rk4(rhs, s.t, s.vec, h), s.layout)
    t, y = s
    return t + h, _rk4(rhs, t, np.asarray(y, dtype=float), h)


@dataclass
class TopologySchedule:
    """Piecewise-constant cluster layouts; the first entry starts at t = 0."""

    entries: list[tuple[float, list[ClusterLayout]]]

    def __post_init__(self):
        if not self.entries or self.entries[0][0] != 0.0:
            raise LayoutError("topology schedule must start at t = 0")
        times = [t for t, _ in self.entries]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise LayoutError("switch times must be strictly increasing")

    @classmethod
    def periodic(cls, layout_sets: Sequence[list[ClusterLayout]], period: float, t_end: float):
        entries, t, r = [], 0.0, 0
        while t < t_end:
            entries.append((t, layout_sets[r % len(layout_sets)]))
            r += 1
            t = r * period
        return cls(entries)


@dataclass
class StopCriterion:
    """All of equality violation, dual disagreement and ``||xdot||_inf`` below ``tol``."""

    tol: float = DEFAULT_TOL
    min_time: float = 0.0

    def met(self, t: float, res: dict) -> bool:
        return t >= self.min_time and max(res["equality"], res["consensus"], res["stationarity"]) <= self.tol


@dataclass
class Segment:
    layout: StateLayout | None
    times: np.ndarray
    data: np.ndarray
    system: object = None


@dataclass
class TrajectoryRecord:
    segments: list[Segment]
    h: float
    stop_time: float | None = None
    final_residuals: dict | None = None
    cache: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return np.concatenate([s.times for s in self.segments])

    @property
    def converged(self) -> bool:
        return self.stop_time is not None

    def x(self) -> np.ndarray:
        """Decision variables at every sample (rows)."""
        return np.vstack([s.data[:, s.layout.x_slice] if s.layout else s.data for s in self.segments])

    def __len__(self):
        return sum(len(s.times) for s in self.segments)

    def states(self):
        for seg in self.segments:
            for t, row in zip(seg.times, seg.data):
                yield AlgorithmState(float(t), row, seg.layout)

    @property
    def final(self) -> AlgorithmState:
        seg = self.segments[-1]
        return AlgorithmState(float(seg.times[-1]), seg.data[-1].copy(), seg.layout)

    def cluster_series(self, k: int, block: str = "y") -> list[tuple[np.ndarray, np.ndarray, tuple]]:
        """Per segment: (times, block values, node ids) for cluster ``k``."""
        out = []
        for seg in self.segments:
            sl = seg.layout.y_slice(k) if block == "y" else seg.layout.v_slice(k)
            out.append((seg.times, seg.data[:, sl], seg.layout.clusters[k]))
        return out


def integrate(rhs, s0, h: float = DEFAULT_STEP, t_end: float = 10.0, sample_every: int = 1,
              schedule: TopologySchedule | None = None, stop: StopCriterion | None = None,
              phases: Sequence[tuple[float, Problem]] | None = None,
              check_every: int | None = None) -> TrajectoryRecord:
    """Fixed-step RK4 from ``s0`` up to ``t_end``.

    ``rhs`` is a ``DistributedSystem``/``CentralizedSystem`` or any callable
    ``f(t, y)``.  ``schedule`` switches cluster layouts and ``phases`` swaps
    the problem (cost parameters) at the given times; both need a
    ``DistributedSystem`` and both are snapped to the step grid.  With
    ``stop`` the residuals are checked every ``check_every`` steps (default:
    at every sample) and integration ends once the criterion holds.
    """
    if not h > 0:
        raise ValueError("step must be positive")
    n_steps = int(round(t_end / h))
    if abs(n_steps * h - t_end) > 1e-9 * max(1.0, t_end):
        warnings.warn(f"t_end {t_end} is not a multiple of h; integrating to {n_steps * h}")
    if isinstance(s0, AlgorithmState):
        vec, layout = s0.vec.astype(float).copy(), s0.layout
    else:
        vec, layout = np.array(s0, dtype=float), None

    events: dict[int, dict] = {}

    def snap(t, what):
        step = int(round(t / h))
        if abs(step * h - t) > 1e-9 * max(1.0, abs(t)):
            warnings.warn(f"{what} at t = {t} snapped to the step grid (t = {step * h})")
        return step

    if schedule is not None or phases:
        if not isinstance(rhs, DistributedSystem):
            raise TypeError("topology schedules and cost phases need a DistributedSystem")
    for t, lays in (schedule.entries if schedule else []):
        events.setdefault(snap(t, "topology switch"), {})["layouts"] = lays
    for t, prob in (phases or []):
        events.setdefault(snap(t, "cost phase"), {})["problem"] = prob

    system = rhs
    check_every = check_every or sample_every

    def apply_events(step):
        nonlocal system, vec, layout
        ev = events.get(step)
        if not ev:
            return False
        system = system.rebuild(layouts=ev.get("layouts"), problem=ev.get("problem"))
        new = system.state_layout
        vec = reindex(vec, layout, new)
        layout = new
        return True

    apply_events(0)
    segments: list[Segment] = []
    times, rows = [0.0], [vec.copy()]
    stop_time = None
    f = system
    form = f.linear_form() if (_COMPILED and hasattr(f, "linear_form")) else None
    event_steps = sorted(s for s in events if s > 0)
    step = 0
    while step < n_steps:
        # advance to the next sample, residual check, event or the end
        nxt = min(n_steps, (step // sample_every + 1) * sample_every)
        if stop is not None:
            nxt = min(nxt, (step // check_every + 1) * check_every)
        later = [e for e in event_steps if e > step]
        if later:
            nxt = min(nxt, later[0])
        if form is not None:
            done = form.advance(vec, h, nxt - step)
            if done < nxt - step:
                raise DivergenceError((step + done) * h)
        else:
            for j in range(step, nxt):
                vec = _rk4(f, j * h, vec, h)
                if not math.isfinite(float(vec.sum())):
                    raise DivergenceError((j + 1) * h)
        step = nxt
        t = step * h
        if step % sample_every == 0 or step == n_steps:
            times.append(t)
            rows.append(vec.copy())
        if stop is not None and step % check_every == 0 and hasattr(f, "residuals"):
            if stop.met(t, f.residuals(vec)):
                stop_time = t
                if times[-1] != t:
                    times.append(t)
                    rows.append(vec.copy())
                break
        if step in events:
            if times[-1] != t:
                times.append(t)
                rows.append(vec.copy())
            segments.append(Segment(layout, np.array(times), np.array(rows), f))
            apply_events(step)
            f = system
            form = f.linear_form() if (_COMPILED and hasattr(f, "linear_form")) else None
            times, rows = [t], [vec.copy()]
    segments.append(Segment(layout, np.array(times), np.array(rows), f))
    rec = TrajectoryRecord(segments, h, stop_time)
    if hasattr(f, "residuals"):
        rec.final_residuals = f.residuals(vec)
    if isinstance(f, DistributedSystem):
        rec.cache.update(_sample_diagnostics(rec))
    return rec


def _sample_diagnostics(rec: TrajectoryRecord) -> dict:
    eq, cons = [], []
    for seg in rec.segments:
        prob = seg.system.problem
        X = seg.data[:, seg.layout.x_slice]
        eq.append(np.abs(X @ prob.W.T - prob.b).max(axis=1) if prob.p else np.zeros(len(X)))
        c = np.zeros(len(X))
        for k in range(prob.p):
            V = seg.data[:, seg.layout.v_slice(k)]
            c = np.maximum(c, np.linalg.norm(V - V.mean(axis=1, keepdims=True), axis=1))
        cons.append(c)
    return {"equality_violation": np.concatenate(eq), "consensus_error": np.concatenate(cons)}


# --------------------------------------------------------------------------
# CSV output

def write_trajectory_csv(record: TrajectoryRecord, path, problem: Problem) -> None:
    """Write samples with a fixed header; slots absent from a segment are left blank."""
    clusters: list[list[int]] = []
    for seg in record.segments:
        for k, nodes in enumerate(seg.layout.clusters):
            if len(clusters) <= k:
                clusters.append([])
            clusters[k] = sorted(set(clusters[k]) | set(nodes))
    header = ["t"]
    header += [f"y[{k + 1}][{n}]" for k, c in enumerate(clusters) for n in c]
    header += [f"v[{k + 1}][{n}]" for k, c in enumerate(clusters) for n in c]
    header += [f"x[{a.id}][{l + 1}]" for a in problem.agents for l in range(a.n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for seg in record.segments:
            sl = seg.layout
            for t, row in zip(seg.times, seg.data):
                out = [repr(float(t))]
                for block in ("y", "v"):
                    for k, nodes in enumerate(clusters):
                        vals = row[sl.y_slice(k) if block == "y" else sl.v_slice(k)]
                        pos = {n: a for a, n in enumerate(sl.clusters[k])}
                        out += [repr(float(vals[pos[n]])) if n in pos else "" for n in nodes]
                out += [repr(float(v)) for v in row[sl.x_slice]]
                w.writerow(out)
