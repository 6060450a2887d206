"""Undirected weighted graphs and the spectral/consensus utilities built on them.

Graphs are small (tens of nodes) and immutable, so everything here is a plain
dense-matrix function.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

CONNECTIVITY_TOL = 1e-9


class GraphError(ValueError):
    """Raised for malformed graphs or requests a graph cannot satisfy."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph over strictly increasing integer node ids.

    ``adjacency[a, b]`` is the weight between ``node_ids[a]`` and
    ``node_ids[b]``; indices are positions, not ids.
    """

    node_ids: tuple[int, ...]
    adjacency: np.ndarray

    def __post_init__(self):
        ids = tuple(int(i) for i in self.node_ids)
        A = np.array(self.adjacency, dtype=float)
        n = len(ids)
        if A.shape != (n, n):
            raise GraphError(f"adjacency shape {A.shape} does not match {n} nodes")
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise GraphError("node ids must be strictly increasing")
        if not np.array_equal(A, A.T):
            raise GraphError("adjacency must be symmetric")
        if np.any(np.diag(A) != 0):
            raise GraphError("adjacency must have a zero diagonal")
        if np.any(A < 0) or not np.all(np.isfinite(A)):
            raise GraphError("edge weights must be finite and nonnegative")
        A.setflags(write=False)
        object.__setattr__(self, "node_ids", ids)
        object.__setattr__(self, "adjacency", A)

    @classmethod
    def from_edges(cls, nodes: Iterable[int], edges: Iterable[Sequence]) -> "Graph":
        """Build from ``(i, j)`` or ``(i, j, weight)`` tuples; weight defaults to 1."""
        ids = tuple(sorted(int(n) for n in nodes))
        pos = {n: a for a, n in enumerate(ids)}
        A = np.zeros((len(ids), len(ids)))
        for e in edges:
            i, j = int(e[0]), int(e[1])
            w = float(e[2]) if len(e) > 2 else 1.0
            if i == j:
                raise GraphError(f"self-loop on node {i}")
            if i not in pos or j not in pos:
                raise GraphError(f"edge ({i}, {j}) references an unknown node")
            A[pos[i], pos[j]] = A[pos[j], pos[i]] = w
        return cls(ids, A)

    @property
    def n(self) -> int:
        return len(self.node_ids)

    def index(self, node: int) -> int:
        try:
            return self.node_ids.index(node)
        except ValueError:
            raise GraphError(f"node {node} not in graph") from None

    def weight(self, i: int, j: int) -> float:
        return float(self.adjacency[self.index(i), self.index(j)])

    def neighbors(self, node: int) -> list[int]:
        row = self.adjacency[self.index(node)]
        return [self.node_ids[b] for b in np.flatnonzero(row > 0)]

    def edges(self) -> list[tuple[int, int, float]]:
        a, b = np.nonzero(np.triu(self.adjacency))
        return [(self.node_ids[i], self.node_ids[j], float(self.adjacency[i, j]))
                for i, j in zip(a, b)]

    def induced(self, nodes: Iterable[int]) -> "Graph":
        ids = sorted(set(int(n) for n in nodes))
        idx = [self.index(n) for n in ids]
        return Graph(tuple(ids), self.adjacency[np.ix_(idx, idx)])


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray
    fiedler: float
    max_eig: float

    def connected(self, tol: float = CONNECTIVITY_TOL) -> bool:
        # a single node is trivially connected though it has no second eigenvalue
        return len(self.eigenvalues) == 1 or self.fiedler > tol


def laplacian(g: Graph) -> np.ndarray:
    A = g.adjacency
    L = np.diag(A.sum(axis=1)) - A
    return L


def spectrum(g: Graph) -> Spectrum:
    """Ascending Laplacian eigenvalues, with the smallest clamped to exact zero."""
    try:
        ev = np.linalg.eigvalsh(laplacian(g))
    except np.linalg.LinAlgError as exc:
        raise GraphError(f"Laplacian eigensolver failed: {exc}") from exc
    ev = np.sort(ev)
    scale = max(1.0, float(np.abs(ev).max(initial=0.0)))
    if abs(ev[0]) > 1e-9 * scale:
        raise GraphError(f"smallest Laplacian eigenvalue {ev[0]:g} is not zero")
    ev[0] = 0.0
    fiedler = float(ev[1]) if len(ev) > 1 else 0.0
    return Spectrum(ev, fiedler, float(ev[-1]))


def _components(g: Graph, nodes: Sequence[int] | None = None) -> list[list[int]]:
    """Connected components (BFS) of the subgraph induced on ``nodes``."""
    nodes = list(g.node_ids if nodes is None else nodes)
    allowed = set(nodes)
    seen: set[int] = set()
    comps = []
    for start in sorted(nodes):
        if start in seen:
            continue
        comp, queue = [], deque([start])
        seen.add(start)
        while queue:
            u = queue.popleft()
            comp.append(u)
            for w in g.neighbors(u):
                if w in allowed and w not in seen:
                    seen.add(w)
                    queue.append(w)
        comps.append(sorted(comp))
    return comps


def is_connected(g: Graph) -> bool:
    return len(_components(g)) <= 1


def hop_distances(g: Graph, source: int) -> dict[int, int]:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for w in g.neighbors(u):
            if w not in dist:
                dist[w] = dist[u] + 1
                queue.append(w)
    return dist


def diameter(g: Graph) -> int:
    if not is_connected(g):
        raise GraphError("diameter of a disconnected graph is undefined")
    return max((max(hop_distances(g, s).values()) for s in g.node_ids), default=0)


def _shortest_path(g: Graph, sources: set[int], targets: set[int]) -> list[int]:
    """Fewest-hop path from any source to any target.

    BFS expands neighbours in ascending id order from sources taken in
    ascending order, so ties resolve toward the smallest ids.
    """
    parent: dict[int, int | None] = {s: None for s in sorted(sources)}
    queue = deque(sorted(sources))
    while queue:
        u = queue.popleft()
        if u in targets:
            path = [u]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            return path[::-1]
        for w in sorted(g.neighbors(u)):
            if w not in parent:
                parent[w] = u
                queue.append(w)
    raise GraphError("no path between components")


def connect_cluster(g: Graph, core: Iterable[int], trace: list | None = None) -> tuple[int, ...]:
    """Smallest-effort connected node set containing ``core``.

    Components of the subgraph induced on ``core`` are joined greedily: at
    each round the closest pair of components (in hops) is linked along a
    shortest path of ``g`` and the interior path nodes are added as helpers.
    Ties go to the pair with the smallest ids.  If ``trace`` is a list, the
    helpers added in each round are appended to it.
    """
    core = set(int(c) for c in core)
    if not core:
        raise GraphError("cluster core must be non-empty")
    missing = core - set(g.node_ids)
    if missing:
        raise GraphError(f"core nodes {sorted(missing)} are not in the graph")
    if not is_connected(g):
        raise GraphError("physical graph must be connected")
    members = set(core)
    while True:
        comps = _components(g, sorted(members))
        if len(comps) == 1:
            return tuple(sorted(members))
        best = None
        for a in range(len(comps)):
            for b in range(a + 1, len(comps)):
                path = _shortest_path(g, set(comps[a]), set(comps[b]))
                key = (len(path), comps[a][0], comps[b][0])
                if best is None or key < best[0]:
                    best = (key, path)
        if trace is not None:
            trace.append(tuple(v for v in best[1] if v not in members))
        members.update(best[1])


def max_consensus(g: Graph, values: Mapping[int, float] | Sequence[float],
                  rounds: int | None = None) -> np.ndarray:
    """Synchronous max-consensus; returns the per-node values after ``rounds``.

    ``rounds`` defaults to the graph diameter, which is enough for every
    node to learn the global maximum.
    """
    if not is_connected(g):
        raise GraphError("max-consensus needs a connected graph")
    if isinstance(values, Mapping):
        z = np.array([float(values[i]) for i in g.node_ids])
    else:
        z = np.array(values, dtype=float)
    if z.shape != (g.n,):
        raise GraphError("one local value per node is required")
    if rounds is None:
        rounds = diameter(g)
    nbr = (g.adjacency > 0) | np.eye(g.n, dtype=bool)
    for _ in range(rounds):
        z = np.where(nbr, z[None, :], -np.inf).max(axis=1)
    return z


def disagreement(v) -> float:
    """Euclidean distance of ``v`` from its mean vector."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise ValueError("disagreement of an empty vector")
    return float(np.linalg.norm(v - v.mean()))
