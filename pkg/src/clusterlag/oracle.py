"""Centralized ground truth: exact KKT solutions for quadratic instances and a
saddle-flow fallback for the other cost families."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import Problem, QuadraticCost
from .penalty import PenaltyConfig

ACTIVITY_TOL = 1e-6
ACCEPT_TOL = 1e-8
MAX_BOUNDED = 16
_CHUNK = 1 << 15


class OracleError(RuntimeError):
    pass


class InfeasibleError(OracleError):
    pass


class OracleTimeout(OracleError):
    def __init__(self, message: str, residuals: dict, x: np.ndarray):
        super().__init__(message)
        self.residuals = residuals
        self.x = x


@dataclass
class KKTPoint:
    x_star: np.ndarray
    nu_star: np.ndarray
    mu_lower: np.ndarray
    mu_upper: np.ndarray
    active_lower: tuple[int, ...] = ()
    active_upper: tuple[int, ...] = ()
    info: dict = field(default_factory=dict)

    @property
    def mu_max(self) -> float:
        return float(max(self.mu_lower.max(initial=0.0), self.mu_upper.max(initial=0.0)))

    def to_dict(self, problem: Problem | None = None) -> dict:
        d = {
            "x_star": self.x_star.tolist(),
            "nu_star": self.nu_star.tolist(),
            "mu_lower": self.mu_lower.tolist(),
            "mu_upper": self.mu_upper.tolist(),
            "active_lower": list(self.active_lower),
            "active_upper": list(self.active_upper),
            "mu_max": self.mu_max,
        }
        if problem is not None:
            d["cost"] = problem.total_cost(self.x_star)
            d["x_by_agent"] = {str(i): v.tolist() for i, v in problem.split(self.x_star).items()}
        d.update({k: v for k, v in self.info.items() if isinstance(v, (int, float, str, bool))})
        return d


def _quadratic_arrays(problem: Problem):
    if not problem.is_quadratic():
        raise OracleError("exact oracle needs quadratic costs")
    a = np.array([c.alpha for c in problem.costs])
    b = np.array([c.beta for c in problem.costs])
    return a, b


def solve_equality_qp(problem: Problem) -> tuple[np.ndarray, np.ndarray]:
    """Minimiser and multipliers of the equality-constrained quadratic problem (boxes ignored)."""
    a, beta = _quadratic_arrays(problem)
    m, p = problem.m, problem.p
    K = np.zeros((m + p, m + p))
    K[:m, :m] = np.diag(2 * a)
    K[:m, m:] = problem.W.T
    K[m:, :m] = problem.W
    rhs = np.concatenate([-beta, problem.b])
    if np.linalg.cond(K) > 1e14:
        raise OracleError("KKT system is singular; costs are probably not strongly convex")
    sol = np.linalg.solve(K, rhs)
    return sol[:m], sol[m:]


def _options(lo: np.ndarray, hi: np.ndarray):
    """Per bounded coordinate: the admissible statuses, 0 free, 1 lower, 2 upper."""
    bounded = [j for j in range(len(lo)) if math.isfinite(lo[j]) or math.isfinite(hi[j])]
    opts = []
    for j in bounded:
        o = [0]
        if math.isfinite(lo[j]):
            o.append(1)
        if math.isfinite(hi[j]):
            o.append(2)
        opts.append(o)
    return bounded, opts


def _solve_batch(status, problem, a, beta, lo, hi, bounded):
    """Reduced KKT solve for a batch of status assignments (rows of ``status``)."""
    n = status.shape[0]
    m, p = problem.m, problem.p
    W, b = problem.W, problem.b
    at_lo = np.zeros((n, m), dtype=bool)
    at_hi = np.zeros((n, m), dtype=bool)
    at_lo[:, bounded] = status == 1
    at_hi[:, bounded] = status == 2
    free = ~(at_lo | at_hi)
    xc = np.where(at_lo, lo, 0.0) + np.where(at_hi, hi, 0.0)
    hinv = 1.0 / (2.0 * a)
    ok = np.ones(n, dtype=bool)
    if p:
        Ff = free.astype(float)
        S = np.einsum("bm,pm,qm->bpq", Ff * hinv, W, W)
        rhs = -(Ff * (beta * hinv)) @ W.T - (b - xc @ W.T)
        sv = np.linalg.svd(S, compute_uv=False)
        scale = max(1.0, float(np.abs(W).max()) ** 2 * float(hinv.max()))
        ok &= sv[:, -1] > 1e-12 * scale
        S[~ok] = np.eye(p)
        nu = np.linalg.solve(S, rhs[..., None])[..., 0]
    else:
        nu = np.zeros((n, 0))
    x = np.where(free, -hinv * (beta + nu @ W), xc)
    g = 2 * a * x + beta + nu @ W
    mu_lo = np.where(at_lo, g, 0.0)
    mu_hi = np.where(at_hi, -g, 0.0)
    return x, nu, mu_lo, mu_hi, free, ok


def solve_boxed_qp(problem: Problem, max_bounded: int = MAX_BOUNDED, tol: float = ACCEPT_TOL,
                   count_all: bool = False) -> KKTPoint:
    """Exact minimiser of a strongly convex quadratic problem with boxes.

    Every assignment of the bounded coordinates to {free, at lower, at upper}
    is tried (coordinates in order, statuses in that order); the first one
    whose reduced equality solution is box-feasible with nonnegative
    multipliers is the answer.  ``count_all`` keeps scanning to report how
    many assignments pass (``info['n_accepted']``).
    """
    a, beta = _quadratic_arrays(problem)
    if np.any(a <= 0):
        raise OracleError("active-set enumeration needs alpha > 0 on every coordinate")
    lo, hi = problem.lower, problem.upper
    bounded, opts = _options(lo, hi)
    if len(bounded) > max_bounded:
        raise OracleError(f"{len(bounded)} bounded coordinates exceed the enumeration guard {max_bounded}")
    radix = np.array([len(o) for o in opts], dtype=np.int64)
    total = int(np.prod(radix)) if len(radix) else 1
    # place values: first coordinate is the most significant digit
    place = np.ones(len(radix), dtype=np.int64)
    for j in range(len(radix) - 2, -1, -1):
        place[j] = place[j + 1] * radix[j + 1]
    lut = np.full((len(opts), 3), -1)
    for j, o in enumerate(opts):
        lut[j, :len(o)] = o
    ptol = tol * (1.0 + np.where(np.isfinite(lo), np.abs(lo), 0) + np.where(np.isfinite(hi), np.abs(hi), 0))
    dtol = tol * (1.0 + float(np.abs(beta).max(initial=0.0)))
    first = None
    n_accepted = 0
    for start in range(0, total, _CHUNK):
        idx = np.arange(start, min(total, start + _CHUNK), dtype=np.int64)
        if len(radix):
            digits = (idx[:, None] // place[None, :]) % radix[None, :]
            status = lut[np.arange(len(opts))[None, :], digits]
        else:
            status = np.zeros((len(idx), 0), dtype=int)
        x, nu, mlo, mhi, free, ok = _solve_batch(status, problem, a, beta, lo, hi, bounded)
        inside = (x >= lo - ptol) & (x <= hi + ptol)
        ok &= np.where(free, inside, True).all(axis=1)
        ok &= (mlo >= -dtol).all(axis=1) & (mhi >= -dtol).all(axis=1)
        hits = np.flatnonzero(ok)
        if hits.size:
            if first is None:
                r = hits[0]
                first = (status[r].copy(), x[r].copy(), nu[r].copy(), mlo[r].copy(), mhi[r].copy())
            n_accepted += hits.size
            if not count_all:
                break
    if first is None:
        raise InfeasibleError("no active-set assignment satisfies the KKT conditions; the boxes "
                              "and equalities appear infeasible")
    status, x, nu, mlo, mhi = first
    act_lo = tuple(int(bounded[j]) for j in np.flatnonzero(status == 1))
    act_hi = tuple(int(bounded[j]) for j in np.flatnonzero(status == 2))
    info = {"assignments": total}
    if count_all:
        info["n_accepted"] = int(n_accepted)
    return KKTPoint(x, nu, np.maximum(mlo, 0.0), np.maximum(mhi, 0.0), act_lo, act_hi, info)


@dataclass
class KKTResidual:
    stationarity: float
    equality: float
    complementarity: float
    dual_sign: float
    box: float = 0.0

    def max(self) -> float:
        return max(self.stationarity, self.equality, self.complementarity, self.dual_sign, self.box)

    def certified(self, tol: float = 1e-8) -> bool:
        return self.max() <= tol

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def kkt_residual(pt: KKTPoint, problem: Problem) -> KKTResidual:
    x, nu = pt.x_star, pt.nu_star
    g = np.array([float(c.grad(xi)) for c, xi in zip(problem.costs, x)])
    stat = g + (problem.W.T @ nu if problem.p else 0.0) - pt.mu_lower + pt.mu_upper
    eq = float(np.abs(problem.W @ x - problem.b).max()) if problem.p else 0.0
    lo, hi = problem.lower, problem.upper
    with np.errstate(invalid="ignore"):
        comp_lo = np.where(np.isfinite(lo), np.abs(pt.mu_lower * (lo - x)), 0.0)
        comp_hi = np.where(np.isfinite(hi), np.abs(pt.mu_upper * (x - hi)), 0.0)
        box = np.maximum(np.where(np.isfinite(lo), lo - x, 0.0), np.where(np.isfinite(hi), x - hi, 0.0))
    # multipliers on absent bounds must vanish too
    stray = np.abs(np.where(np.isfinite(lo), 0.0, pt.mu_lower)).max(initial=0.0) + \
        np.abs(np.where(np.isfinite(hi), 0.0, pt.mu_upper)).max(initial=0.0)
    return KKTResidual(
        stationarity=float(np.abs(stat).max(initial=0.0)),
        equality=eq,
        complementarity=float(max(comp_lo.max(initial=0.0), comp_hi.max(initial=0.0), stray)),
        dual_sign=float(max(0.0, -pt.mu_lower.min(initial=0.0), -pt.mu_upper.min(initial=0.0))),
        box=float(max(0.0, box.max(initial=0.0))),
    )


@dataclass
class Multipliers:
    lower: np.ndarray
    upper: np.ndarray
    valid: bool
    active_lower: tuple[int, ...]
    active_upper: tuple[int, ...]


def recover_multipliers(x, nu, problem: Problem, tol: float = ACTIVITY_TOL) -> Multipliers:
    """Box multipliers from stationarity on the coordinates found at a bound."""
    x = np.asarray(x, dtype=float)
    nu = np.asarray(nu, dtype=float)
    lo, hi = problem.lower, problem.upper
    g = np.array([float(c.grad(xi)) for c, xi in zip(problem.costs, x)])
    if problem.p:
        g = g + problem.W.T @ nu
    with np.errstate(invalid="ignore"):
        near_lo = np.isfinite(lo) & (np.abs(x - lo) <= tol * (1 + np.abs(np.where(np.isfinite(lo), lo, 0))))
        near_hi = np.isfinite(hi) & (np.abs(x - hi) <= tol * (1 + np.abs(np.where(np.isfinite(hi), hi, 0))))
    both = np.flatnonzero(near_lo & near_hi)
    if both.size:
        raise ValueError(f"coordinates {both.tolist()} are within tolerance of both bounds")
    mu_lo = np.where(near_lo, g, 0.0)
    mu_hi = np.where(near_hi, -g, 0.0)
    valid = bool(mu_lo.min(initial=0.0) >= -tol and mu_hi.min(initial=0.0) >= -tol)
    return Multipliers(mu_lo, mu_hi, valid, tuple(np.flatnonzero(near_lo).tolist()),
                       tuple(np.flatnonzero(near_hi).tolist()))


def licq_holds(pt: KKTPoint, problem: Problem, rtol: float = 1e-10) -> bool:
    """Linear independence of the equality rows and the active box normals at ``pt``."""
    active = sorted(set(pt.active_lower) | set(pt.active_upper))
    rows = [problem.W] if problem.p else []
    if active:
        E = np.zeros((len(active), problem.m))
        E[np.arange(len(active)), active] = 1.0
        rows.append(E)
    if not rows:
        return True
    G = np.vstack(rows)
    if G.shape[0] > problem.m:
        return False
    sv = np.linalg.svd(G, compute_uv=False)
    return bool(sv[-1] > rtol * sv[0])


@dataclass
class FlowSolution:
    x: np.ndarray
    nu: np.ndarray
    t: float
    residuals: dict
    h: float


def centralized_flow_solve(problem: Problem, rho: float = 1.0, penalty: PenaltyConfig | None = None,
                           h: float | None = None, t_max: float = 500.0, tol: float = 1e-6,
                           x0=None, nu0=None, check_every: int = 50) -> FlowSolution:
    """Integrate the centralized saddle flow until it settles.

    Boxed problems use the smooth penalty (``penalty`` defaults to the
    automatic weight).  Raises ``OracleTimeout`` if the residuals stay above
    ``tol`` up to ``t_max``.
    """
    from .dynamics import CentralizedSystem, StopCriterion, integrate, suggest_step

    boxed = bool(np.isfinite(problem.lower).any() or np.isfinite(problem.upper).any())
    sys_ = CentralizedSystem(problem, rho, use_penalized=boxed, penalty=penalty or PenaltyConfig())
    if h is None:
        h = suggest_step(sys_)
    s0 = np.concatenate([np.zeros(problem.p) if nu0 is None else np.asarray(nu0, dtype=float),
                         np.zeros(problem.m) if x0 is None else np.asarray(x0, dtype=float)])
    t_end = math.ceil(t_max / h) * h
    rec = integrate(sys_, s0, h, t_end, sample_every=max(1, int(round(t_end / h)) // 200 or 1),
                    stop=StopCriterion(tol), check_every=check_every)
    final = rec.segments[-1].data[-1]
    nu, x = final[:problem.p], final[problem.p:]
    if not rec.converged:
        raise OracleTimeout(f"centralized flow did not settle by t = {t_max:g} "
                            f"(residuals {rec.final_residuals})", rec.final_residuals, x)
    return FlowSolution(x, nu, rec.stop_time, rec.final_residuals, h)
