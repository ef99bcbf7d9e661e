"""Chance-constrained multi-robot planning in Gaussian belief space."""

from .cbs import SearchConfig, cc_kcbs, centralized_plan, verify_solution
from .chance import CheckerConfig
from .scenario import PlanResult, Scenario, env8, load_result, load_scenario

__all__ = [
    "CheckerConfig",
    "PlanResult",
    "Scenario",
    "SearchConfig",
    "cc_kcbs",
    "centralized_plan",
    "env8",
    "load_result",
    "load_scenario",
    "verify_solution",
]
