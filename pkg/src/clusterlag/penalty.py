"""Smooth epsilon-exact box penalty, multiplier bounds and penalty-weight selection."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .model import AgentSpec, Problem, cost_grad, cost_value, grad_inf_bound

DEFAULT_GAMMA_MARGIN = 1e-3
OMEGA_SV_TOL = 1e-10
OMEGA_ENUMERATION_LIMIT = 10**6


class BoundPreconditionError(ValueError):
    """A multiplier bound was requested for a problem outside its hypotheses."""


def p_eps(y, eps: float):
    """Huber-like smoothing of ``max(0, y)``: zero, then quadratic on ``[0, eps]``, then linear."""
    y = np.asarray(y, dtype=float)
    out = np.where(y <= 0, 0.0, np.where(y <= eps, y * y / (2 * eps), y - eps / 2))
    return out if out.ndim else float(out)


def p_eps_grad(y, eps: float):
    out = np.clip(np.asarray(y, dtype=float) / eps, 0.0, 1.0)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class PenaltyConfig:
    epsilon: float = 1e-3
    gamma: float | str = "auto"
    adjusted_bounds: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.gamma != "auto" and not float(self.gamma) > 0:
            raise ValueError("gamma must be positive or 'auto'")

    @property
    def resolved(self) -> bool:
        return self.gamma != "auto"

    def gamma_value(self) -> float:
        if not self.resolved:
            raise ValueError("penalty weight is still 'auto'; resolve it against a problem first")
        return float(self.gamma)

    def effective_bounds(self, lower, upper):
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if self.adjusted_bounds:
            return lower + self.epsilon, upper - self.epsilon
        return lower, upper


def penalty_grad_vector(x, lower, upper, eps: float, gamma: float) -> np.ndarray:
    """Gradient of the box penalty alone; infinite bounds contribute nothing."""
    with np.errstate(invalid="ignore"):
        g = np.clip((x - upper) / eps, 0.0, 1.0) - np.clip((lower - x) / eps, 0.0, 1.0)
    return gamma * g


def penalty_value_vector(x, lower, upper, eps: float, gamma: float) -> float:
    return gamma * float(np.sum(p_eps(lower - x, eps)) + np.sum(p_eps(x - upper, eps)))


def penalized_value(agent: AgentSpec, x, cfg: PenaltyConfig) -> float:
    x = np.asarray(x, dtype=float)
    lo, hi = cfg.effective_bounds(agent.lower, agent.upper)
    return cost_value(agent, x) + penalty_value_vector(x, lo, hi, cfg.epsilon, cfg.gamma_value())


def penalized_grad(agent: AgentSpec, x, cfg: PenaltyConfig) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    lo, hi = cfg.effective_bounds(agent.lower, agent.upper)
    return cost_grad(agent, x) + penalty_grad_vector(x, lo, hi, cfg.epsilon, cfg.gamma_value())


@dataclass
class FeasibilityReport:
    feasible: bool
    equality_violation: float
    equality_tol: float
    violations: list[dict] = field(default_factory=list)
    max_box_violation: float = 0.0


def eps_feasible(x, problem: Problem, eps: float, bounds=None) -> FeasibilityReport:
    """Membership in the epsilon-relaxed feasible set.

    ``bounds`` overrides the problem's boxes (lower, upper) when given.
    Equalities are checked to ``1e-6 * (1 + ||b||_inf)``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.m,):
        raise ValueError(f"expected {problem.m} coordinates, got shape {x.shape}")
    b = problem.b
    eq = float(np.abs(problem.W @ x - b).max()) if problem.p else 0.0
    tol = 1e-6 * (1.0 + float(np.abs(b).max(initial=0.0)))
    lower, upper = (problem.lower, problem.upper) if bounds is None else bounds
    owner = problem.owner()
    local = np.concatenate([np.arange(a.n) for a in problem.agents])
    violations = []
    worst = 0.0
    for j in range(problem.m):
        for side, excess in (("lower", lower[j] - x[j]), ("upper", x[j] - upper[j])):
            if np.isfinite(excess):
                worst = max(worst, float(excess))
                if excess > eps:
                    violations.append({"agent": int(owner[j]), "subagent": int(local[j]) + 1,
                                       "side": side, "excess": float(excess)})
    if eq > tol:
        violations.append({"equality": eq, "tol": tol})
    return FeasibilityReport(not violations, eq, tol, violations, worst)


# --------------------------------------------------------------------------
# multiplier bounds

@dataclass(frozen=True)
class MultiplierBound:
    value: float
    method: str
    ingredients: dict
    label: str = ""

    def to_dict(self) -> dict:
        return {"value": self.value, "method": self.method,
                "ingredients": dict(self.ingredients), "label": self.label}


def _grad_bound(problem: Problem) -> float:
    bad = [a.id for a in problem.agents if not a.fully_bounded]
    if bad:
        raise BoundPreconditionError(f"agents {bad} have subagents without both bounds")
    return max(grad_inf_bound(a) for a in problem.agents)


def mu_bound_single(problem: Problem) -> MultiplierBound:
    """Bound for one weighted equality with positive weights and boxed variables."""
    if problem.p != 1:
        raise BoundPreconditionError(f"single-constraint bound needs p = 1, problem has p = {problem.p}")
    w = problem.W[0]
    if np.any(w <= 0):
        raise BoundPreconditionError("single-constraint bound needs every weight to be positive")
    G = _grad_bound(problem)
    w_lo, w_hi = float(w.min()), float(w.max())
    return MultiplierBound((1.0 + w_hi / w_lo) * G, "single_constraint",
                           {"w_min": w_lo, "w_max": w_hi, "grad_bound": G})


def omega(W, enumeration_limit: int = OMEGA_ENUMERATION_LIMIT) -> float:
    """Smallest sigma_min over the invertible p-by-p column subsets of ``W``."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    p, m = W.shape
    count = math.comb(m, p)
    if count > enumeration_limit:
        raise BoundPreconditionError(
            f"omega needs {count} submatrices, above the limit {enumeration_limit}; "
            "raise enumeration_limit explicitly to proceed")
    combos = itertools.combinations(range(m), p)
    best = math.inf
    chunk = 4096
    while True:
        batch = list(itertools.islice(combos, chunk))
        if not batch:
            break
        idx = np.array(batch)
        sub = np.transpose(W[:, idx], (1, 0, 2))          # (batch, p, p)
        s = np.linalg.svd(sub, compute_uv=False)[:, -1]
        s = s[s > OMEGA_SV_TOL]
        if s.size:
            best = min(best, float(s.min()))
    if not math.isfinite(best):
        raise BoundPreconditionError("no invertible p-by-p submatrix; W is not full row rank")
    return best


def mu_bound_licq(problem: Problem, enumeration_limit: int = OMEGA_ENUMERATION_LIMIT) -> MultiplierBound:
    """General bound, valid when LICQ holds at the minimiser (not checked here)."""
    G = _grad_bound(problem)
    om = omega(problem.W, enumeration_limit)
    w_hi = float(np.abs(problem.W).max())
    return MultiplierBound((1.0 + w_hi / om) * G, "licq",
                           {"omega": om, "w_max": w_hi, "grad_bound": G},
                           label="valid under LICQ")


def mu_bound(problem: Problem) -> MultiplierBound:
    """Pick the single-constraint bound when it applies, else the LICQ one."""
    try:
        return mu_bound_single(problem)
    except BoundPreconditionError:
        return mu_bound_licq(problem)


def gamma_auto(N: int, mb: MultiplierBound | float, margin: float = DEFAULT_GAMMA_MARGIN) -> float:
    value = mb.value if isinstance(mb, MultiplierBound) else float(mb)
    if not math.isfinite(value):
        raise ValueError("multiplier bound must be finite")
    # (1 - N) / (1 - sqrt(N)) == 1 + sqrt(N); a lone agent keeps factor 1
    factor = 1.0 + math.sqrt(N) if N >= 2 else 1.0
    return factor * value * (1.0 + margin)


def gap_bound(eps: float, gamma: float, N: int) -> float:
    return eps * gamma * N


def resolve_penalty(problem: Problem, cfg: PenaltyConfig,
                    margin: float = DEFAULT_GAMMA_MARGIN) -> tuple[PenaltyConfig, MultiplierBound | None]:
    """Return ``cfg`` with a numeric gamma, plus the bound used when it was 'auto'."""
    if cfg.resolved:
        return cfg, None
    mb = mu_bound(problem)
    return replace(cfg, gamma=gamma_auto(problem.N, mb, margin)), mb
