"""Optimal weighted random routing and learning-based dispatch simulation
for discrete-time multi-server queues."""

from .model import (
    QueueState,
    RandomStream,
    StabilityError,
    SystemParams,
    geo_mean_queue,
    geometric_fleet,
    step,
    total_mean_queue,
)
from .routing import (
    RoutingVector,
    SensitivityConstants,
    optimal_routing,
    oracle_optimal_routing,
    residual_capacities,
    routing_for_support,
    sensitivity_constants,
    tolerance_gap_estimate,
)
from .estimation import RateEstimator, concentration_bound
from .policies import DispatchContext, PolicySpec, decide, exploration_prob, parse_policy
from .sim import (
    RegretTrace,
    Scenario,
    busy_period,
    geometric_checkpoints,
    run_coupled,
    run_single,
    sample_maximal_coupling,
    tv_distance,
)

__all__ = [
    "QueueState", "RandomStream", "StabilityError", "SystemParams",
    "geo_mean_queue", "geometric_fleet", "step", "total_mean_queue",
    "RoutingVector", "SensitivityConstants", "optimal_routing",
    "oracle_optimal_routing", "residual_capacities", "routing_for_support",
    "sensitivity_constants", "tolerance_gap_estimate",
    "RateEstimator", "concentration_bound",
    "DispatchContext", "PolicySpec", "decide", "exploration_prob",
    "parse_policy",
    "RegretTrace", "Scenario", "busy_period", "geometric_checkpoints",
    "run_coupled", "run_single", "sample_maximal_coupling", "tv_distance",
]

__version__ = "0.1.0"
