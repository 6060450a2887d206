import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterlag.graph import Graph
from clusterlag.model import AgentSpec, EqualityConstraint, Problem, QuadraticCost, cost_grad
from clusterlag.oracle import solve_boxed_qp
from clusterlag.penalty import (BoundPreconditionError, MultiplierBound, PenaltyConfig, eps_feasible,
                                gamma_auto, gap_bound, mu_bound, mu_bound_licq, mu_bound_single, omega,
                                p_eps, p_eps_grad, penalized_grad, penalized_value, resolve_penalty)
from clusterlag.scenarios import example1, random_quadratic, table1


def scalar_problem(weights, lo=0.0, hi=1.0, rhs=1.0, alphas=None):
    n = len(weights)
    alphas = alphas or [1.0] * n
    agents = tuple(AgentSpec(i + 1, (QuadraticCost(alphas[i]),), (lo,), (hi,)) for i in range(n))
    g = Graph.from_edges(range(1, n + 1), [(i, i + 1) for i in range(1, n)])
    return Problem(agents, (EqualityConstraint({i + 1: (w,) for i, w in enumerate(weights)}, rhs),), g)


def test_p_eps_examples():
    assert p_eps(-1, 0.01) == 0
    assert p_eps(0.05, 0.1) == pytest.approx(0.0125)
    assert p_eps_grad(0.05, 0.1) == pytest.approx(0.5)
    assert p_eps(0.2, 0.1) == pytest.approx(0.15)
    assert p_eps_grad(0.2, 0.1) == 1


@settings(max_examples=100)
@given(st.floats(1e-6, 10))
def test_p_eps_is_c1(eps):
    for y in (0.0, eps):
        lo, hi = np.nextafter(y, -np.inf), np.nextafter(y, np.inf)
        # one ulp either side of the branch point; allow a few ulps of the value itself
        tol = 8 * np.spacing(max(1.0, abs(y)))
        assert abs(p_eps(lo, eps) - p_eps(hi, eps)) <= tol
        assert abs(p_eps_grad(lo, eps) - p_eps_grad(hi, eps)) <= tol / eps + 1e-15


@given(st.floats(1e-3, 10), st.floats(-20, 20), st.floats(1e-3, 2))
def test_p_eps_convex(eps, y, d):
    second = p_eps(y + d, eps) - 2 * p_eps(y, eps) + p_eps(y - d, eps)
    assert second >= -1e-12


def test_penalized_grad_interior_and_outside():
    a = AgentSpec(1, (QuadraticCost(1.0, 2.0),), (0.0,), (1.0,))
    cfg = PenaltyConfig(0.01, 200.0)
    x = np.array([0.5])
    np.testing.assert_array_equal(penalized_grad(a, x, cfg), cost_grad(a, x))
    x = np.array([1.0 + 0.01])
    assert penalized_grad(a, x, cfg)[0] == pytest.approx(cost_grad(a, x)[0] + 200.0)
    x = np.array([-0.02])
    assert penalized_grad(a, x, cfg)[0] == pytest.approx(cost_grad(a, x)[0] - 200.0)


def test_adjusted_bounds_shift_penalty():
    a = AgentSpec(1, (QuadraticCost(1.0),), (0.0,), (1.0,))
    cfg = PenaltyConfig(0.1, 10.0, adjusted_bounds=True)
    # x = 1 lies eps past the tightened upper bound 0.9
    assert penalized_grad(a, np.array([1.0]), cfg)[0] == pytest.approx(2.0 + 10.0)


@given(st.floats(-2, 3), st.floats(1e-3, 0.5), st.booleans())
def test_penalized_grad_finite_difference(x, eps, adjusted):
    a = AgentSpec(1, (QuadraticCost(0.7, -0.3),), (0.0,), (1.0,))
    cfg = PenaltyConfig(eps, 5.0, adjusted)
    lo, hi = cfg.effective_bounds(a.lower, a.upper)
    kinks = [lo[0] - eps, lo[0], hi[0], hi[0] + eps]
    if min(abs(x - k) for k in kinks) < 1e-4:
        return
    h = 1e-7
    fd = (penalized_value(a, [x + h], cfg) - penalized_value(a, [x - h], cfg)) / (2 * h)
    assert fd == pytest.approx(penalized_grad(a, [x], cfg)[0], rel=1e-5, abs=1e-5)


def test_eps_feasible_examples():
    prob = scalar_problem([1.0, 1.0], rhs=1.0)
    pt = solve_boxed_qp(prob)
    assert eps_feasible(pt.x_star, prob, 1e-3).feasible
    prob2 = scalar_problem([1.0, 1.0], rhs=2.0)
    x = np.array([1.0 + 0.5e-3, 1.0 - 0.5e-3])
    assert eps_feasible(x, prob2, 1e-3).feasible
    x = np.array([1.0 + 2e-3, 1.0 - 2e-3])
    rep = eps_feasible(x, prob2, 1e-3)
    assert not rep.feasible
    assert rep.violations == [{"agent": 1, "subagent": 1, "side": "upper", "excess": pytest.approx(2e-3)}]


def test_mu_bound_single_examples():
    prob = scalar_problem([1.0, 1.0, 1.0], lo=-1.0, hi=1.0)
    assert mu_bound_single(prob).value == pytest.approx(2 * 2.0)
    one = scalar_problem([2.0], lo=0.0, hi=1.5)
    assert mu_bound_single(one).value == pytest.approx((1 + 1) * 3.0)


def test_mu_bound_single_preconditions():
    with pytest.raises(BoundPreconditionError, match="positive"):
        mu_bound_single(scalar_problem([1.0, -1.0]))
    with pytest.raises(BoundPreconditionError, match="p = 1"):
        mu_bound_single(example1())
    agents = (AgentSpec(1, (QuadraticCost(1.0),), (0.0,), None), AgentSpec(2, (QuadraticCost(1.0),), (0.0,), (1.0,)))
    prob = Problem(agents, (EqualityConstraint({1: (1,), 2: (1,)}, 1),), Graph.from_edges([1, 2], [(1, 2)]))
    with pytest.raises(BoundPreconditionError, match="both bounds"):
        mu_bound_single(prob)


def test_omega_examples():
    assert omega([[1.0, 1.0]]) == pytest.approx(1.0)
    assert omega(np.hstack([np.eye(2), np.zeros((2, 3))])) == pytest.approx(1.0)


def _omega_reversed(W):
    # independent enumeration, reversed order, plain per-subset SVD
    p, m = W.shape
    best = math.inf
    for cols in reversed(list(itertools.combinations(range(m), p))):
        s = np.linalg.svd(W[:, cols], compute_uv=False)[-1]
        if s > 1e-10:
            best = min(best, s)
    return best


@given(st.integers(0, 10**6), st.integers(1, 3), st.integers(3, 7))
def test_omega_matches_independent_enumeration(seed, p, m):
    W = np.random.default_rng(seed).normal(size=(p, m))
    assert omega(W) == pytest.approx(_omega_reversed(W), rel=1e-12)


def test_omega_limit():
    with pytest.raises(BoundPreconditionError, match="limit"):
        omega(np.ones((2, 50)) + np.eye(2, 50), enumeration_limit=100)


def test_licq_bound_examples():
    prob = scalar_problem([1.0, 1.0, 1.0], lo=-1.0, hi=1.0)
    assert mu_bound_licq(prob).value == pytest.approx(mu_bound_single(prob).value)
    agents = tuple(AgentSpec(i, (QuadraticCost(1.0),), (-1.0,), (1.0,)) for i in (1, 2))
    cons = (EqualityConstraint({1: (1,)}, 0.5), EqualityConstraint({2: (1,)}, 0.5))
    prob = Problem(agents, cons, Graph.from_edges([1, 2], [(1, 2)]))
    assert mu_bound_licq(prob).value == pytest.approx(2 * 2.0)
    assert mu_bound_licq(prob).label == "valid under LICQ"


def test_mu_bound_dispatch_uses_licq():
    mb = mu_bound(example1())
    assert mb.method == "licq"
    assert mb.ingredients["grad_bound"] == pytest.approx(30.423594)


def test_gamma_auto_examples():
    assert gamma_auto(4, 2.0, margin=0) == pytest.approx(6.0)
    assert gamma_auto(9, 1.0, margin=0) == pytest.approx(4.0)
    assert gamma_auto(1, 3.0, margin=0) == 3.0
    assert gamma_auto(4, MultiplierBound(2.0, "x", {})) == pytest.approx(6.0 * 1.001)
    with pytest.raises(ValueError):
        gamma_auto(4, math.inf)


def test_gap_bound_examples():
    assert gap_bound(0.001, 6, 4) == pytest.approx(0.024)
    assert gap_bound(0.01, 200, 5) == pytest.approx(10.0)
    assert gap_bound(1e-300, 6, 4) < 1e-290


def test_resolve_penalty():
    cfg, mb = resolve_penalty(example1(), PenaltyConfig(1e-3))
    assert mb.method == "licq"
    assert cfg.gamma == pytest.approx(gamma_auto(6, mb))
    fixed, none = resolve_penalty(example1(), PenaltyConfig(1e-3, 50.0))
    assert fixed.gamma == 50.0 and none is None


@pytest.mark.parametrize("seed", range(100))
def test_single_bound_dominates_oracle_multipliers(seed):
    prob = table1(seed)
    assert solve_boxed_qp(prob).mu_max <= mu_bound_single(prob).value


@pytest.mark.parametrize("seed", range(50))
def test_licq_bound_dominates_oracle_multipliers(seed):
    prob = random_quadratic(1000 + seed, n_agents=(2, 4), n_sub=(1, 2), max_vars=6)
    assert solve_boxed_qp(prob).mu_max <= mu_bound_licq(prob).value


@given(st.floats(0, 3), st.floats(-3, 3), st.floats(-2, 0), st.floats(0, 2), st.floats(0, 1), st.floats(0, 1))
def test_grad_bound_monotone_under_enlargement(alpha, beta, lo, hi, dlo, dhi):
    c = QuadraticCost(alpha, beta)
    assert c.max_abs_grad(lo - dlo, hi + dhi) >= c.max_abs_grad(lo, hi)
