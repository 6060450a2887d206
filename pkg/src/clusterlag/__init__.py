"""Cluster-based distributed augmented Lagrangian flows for constrained resource allocation."""

from .graph import Graph, connect_cluster, disagreement, is_connected, laplacian, max_consensus, spectrum
from .model import (AgentSpec, EqualityConstraint, GainConfig, Problem, ProblemValidationError,
                    QuadraticCost, SmoothDeadzoneCost, validate)
from .penalty import PenaltyConfig, eps_feasible, gamma_auto, mu_bound, mu_bound_licq, mu_bound_single, omega
from .dynamics import (CentralizedSystem, DistributedSystem, StopCriterion, TopologySchedule,
                       build_layouts, init_state, integrate)
from .oracle import KKTPoint, centralized_flow_solve, kkt_residual, solve_boxed_qp, solve_equality_qp

__all__ = [
    "Graph", "connect_cluster", "disagreement", "is_connected", "laplacian", "max_consensus", "spectrum",
    "AgentSpec", "EqualityConstraint", "GainConfig", "Problem", "ProblemValidationError",
    "QuadraticCost", "SmoothDeadzoneCost", "validate",
    "PenaltyConfig", "eps_feasible", "gamma_auto", "mu_bound", "mu_bound_licq", "mu_bound_single", "omega",
    "CentralizedSystem", "DistributedSystem", "StopCriterion", "TopologySchedule", "build_layouts",
    "init_state", "integrate",
    "KKTPoint", "centralized_flow_solve", "kkt_residual", "solve_boxed_qp", "solve_equality_qp",
]
