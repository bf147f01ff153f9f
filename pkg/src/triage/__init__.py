"""Criticality-aware graceful degradation for containerized clusters.

During a capacity crunch, the planner turns per-microservice criticality
tags, optional dependency graphs, and an operator objective into a global
activation order; the scheduler packs that order onto the surviving
servers by best-fit, migration, and lowest-rank-first deletion.  The sim
module injects failures and benchmarks the pipeline against exact
optimization and non-cooperative baselines.
"""

from .model import (
    ActivationPlan,
    Application,
    CallGraph,
    ClusterState,
    DependencyGraph,
    Microservice,
    ParseError,
    ServerNode,
    ValidationError,
    active_microservices,
    load_cluster,
    load_workload,
    save_cluster,
    save_workload,
    validate_cluster_state,
)
from .planner import (
    CostObjective,
    FairObjective,
    PlanResult,
    compute_water_fill,
    global_rank,
    plan,
    priority_estimator,
)
from .scheduler import Action, PackingOutcome, delete_to_fit, get_best_fit, repack_to_fit, schedule
from .baselines import baseline_default, baseline_fair, baseline_priority
from .oracle import BudgetExceededError, ExactSolution, greedy_coverage, solve_coverage, solve_exact
from .workload import (
    GenSpec,
    alibaba_like_spec,
    assign_resources_cpm,
    assign_resources_longtailed,
    capacity_for_utilization,
    generate_workload,
    make_cluster,
    tag_frequency_based,
    tag_service_level,
)
from .sim import (
    EpisodeResult,
    FailureEvent,
    ReplayResult,
    critical_availability,
    fairness_deviation,
    initial_placement,
    inject_failure,
    replay_trace,
    requests_served,
    revenue_value,
    run_episode,
    sweep,
    utilization,
)

__version__ = "0.1.0"
