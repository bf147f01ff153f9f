"""Failure injection, metric computation, episode execution, and replay.

An episode is: inject a failure, run one scheme (the criticality-aware
planner+scheduler or a baseline), validate the resulting state, and score
it.  Replay mode walks a capacity trace through time, carrying the cluster
state forward and re-running the scheme at every capacity change.
"""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .baselines import baseline_default, baseline_fair, baseline_priority
from .model import (
    ActivationPlan,
    Application,
    ClusterState,
    ValidationError,
    active_microservices,
    apps_by_id,
    validate_cluster_state,
)
from .planner import compute_water_fill, plan
from .scheduler import PackingOutcome, schedule

__all__ = [
    "SCHEMES",
    "FailureEvent",
    "EpisodeResult",
    "ReplayPoint",
    "ReplayResult",
    "inject_failure",
    "critical_availability",
    "revenue_value",
    "fairness_deviation",
    "utilization",
    "requests_served",
    "initial_placement",
    "run_episode",
    "replay_trace",
    "sweep",
    "results_csv",
    "RESULT_COLUMNS",
]

SCHEMES = ("triage", "default", "fair", "priority")

#: Failure-detection and action delays applied in replay mode (seconds).
DEFAULT_DETECT_S = 15.0
DEFAULT_ACT_S = 0.0

RESULT_COLUMNS = [
    "scheme", "objective", "failure_frac", "seed", "avail", "revenue",
    "pos_dev", "neg_dev", "util", "plan_ms", "sched_ms",
    "deletes", "migrations", "restarts", "dropped",
]


@dataclass(frozen=True)
class FailureEvent:
    failed: frozenset[str]
    fraction: float
    seed: int


@dataclass(frozen=True)
class EpisodeResult:
    scheme: str
    objective: str
    failure_frac: float
    seed: int
    per_app_availability: dict[str, int]
    availability: float
    revenue: float
    pos_dev: float
    neg_dev: float
    utilization: float
    plan_s: float
    sched_s: float
    deletes: int
    migrations: int
    restarts: int
    dropped: int


def _failure_order(state: ClusterState, seed: int) -> list[str]:
    ids = sorted(state.servers)
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    return ids


def _failed_prefix(state: ClusterState, order: Sequence[str], fraction: float) -> set[str]:
    """Servers to fail so the lost capacity is ~fraction of the total,
    within half a server (round-to-nearest)."""
    target = fraction * state.total_capacity()
    failed: set[str] = set()
    lost = 0.0
    for sid in order:
        cap = state.servers[sid].capacity
        if cap > 0 and target - lost >= cap / 2:
            failed.add(sid)
            lost += cap
            if lost >= target:
                break
    return failed


def inject_failure(cluster: ClusterState, fraction: float, seed: int) -> tuple[ClusterState, FailureEvent]:
    """Fail a uniform random subset of servers covering ~fraction of total
    capacity; their assignments are cleared.  Deterministic under seed."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("failure fraction must lie in [0, 1]")
    state = cluster.copy()
    failed = _failed_prefix(state, _failure_order(state, seed), fraction)
    state.mark_failed(failed)
    return state, FailureEvent(frozenset(failed), fraction, seed)


def critical_availability(apps: Sequence[Application], state: ClusterState) -> tuple[dict[str, int], float]:
    """Per-app 0/1 scores (1 iff every C1 microservice is fully running)
    and their mean."""
    active = active_microservices(apps, state)
    scores: dict[str, int] = {}
    for app in apps:
        critical = [m for m, ms in app.microservices.items() if ms.tag == 1]
        scores[app.id] = int(all((app.id, m) in active for m in critical))
    mean = sum(scores.values()) / len(scores) if scores else 1.0
    return scores, mean


def revenue_value(apps: Sequence[Application], state: ClusterState) -> float:
    """Unnormalized revenue: price * demand summed over active microservices."""
    active = active_microservices(apps, state)
    lookup = apps_by_id(apps)
    return sum(lookup[a].price_per_unit * lookup[a].microservices[m].demand for a, m in active)


def fairness_deviation(apps: Sequence[Application], state: ClusterState, capacity: float) -> tuple[float, float]:
    """Positive/negative deviation from the water-fill share, normalized by
    the surviving capacity."""
    shares = compute_water_fill({app.id: app.total_demand for app in apps}, capacity)
    active = active_microservices(apps, state)
    pos = neg = 0.0
    for app in apps:
        alloc = sum(ms.demand for m, ms in app.microservices.items() if (app.id, m) in active)
        pos += max(0.0, alloc - shares[app.id])
        neg += max(0.0, shares[app.id] - alloc)
    if capacity <= 0:
        return 0.0, 0.0
    return pos / capacity, neg / capacity


def utilization(apps: Sequence[Application], state: ClusterState) -> float:
    lookup = apps_by_id(apps)
    cap = state.healthy_capacity()
    if cap <= 0:
        return 0.0
    used = sum(lookup[a].microservices[m].replica_demand for (a, m, _) in state.assignment)
    return used / cap


def requests_served(apps: Sequence[Application], state: ClusterState) -> float:
    """Total weight of call graphs whose microservices are all active."""
    active = active_microservices(apps, state)
    total = 0.0
    for app in apps:
        app_active = {m for a, m in active if a == app.id}
        for cg in app.call_graphs or ():
            if set(cg.microservice_ids) <= app_active:
                total += cg.weight
    return total


def initial_placement(apps: Sequence[Application], cluster: ClusterState) -> ClusterState:
    """Pack the entire workload onto an empty cluster (the pre-failure state)."""
    entries = [(app.id, m) for app in sorted(apps, key=lambda a: a.id) for m in app.sorted_ids()]
    outcome = schedule(ActivationPlan(entries), cluster, apps)
    if outcome.dropped:
        raise ValidationError(f"cluster cannot host the full workload; {len(outcome.dropped)} microservices dropped")
    return outcome.state


def _run_scheme(
    scheme: str,
    objective: str,
    apps: Sequence[Application],
    failed_state: ClusterState,
    capacity: float,
) -> tuple[PackingOutcome, float, float]:
    """Dispatch one scheme; returns (outcome, plan_s, sched_s)."""
    if scheme == "triage":
        result = plan(apps, capacity, objective)  # type: ignore[arg-type]
        start = time.perf_counter()
        outcome = schedule(result.plan, failed_state, apps)
        return outcome, result.duration_s, time.perf_counter() - start
    start = time.perf_counter()
    if scheme == "default":
        outcome = baseline_default(apps, failed_state)
    elif scheme == "fair":
        outcome = baseline_fair(apps, capacity, failed_state)
    elif scheme == "priority":
        outcome = baseline_priority(apps, capacity, failed_state)
    else:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    return outcome, 0.0, time.perf_counter() - start


def run_episode(
    apps: Sequence[Application],
    cluster: ClusterState,
    fraction: float,
    scheme: str = "triage",
    objective: str = "fair",
    seed: int = 0,
) -> EpisodeResult:
    """Inject one failure, run one scheme, validate, and score.

    ``cluster`` may carry the pre-failure assignment; if it is empty the
    full workload is packed first.  Availability and revenue are normalized
    against that pre-failure state.
    """
    prior = cluster if cluster.assignment else initial_placement(apps, cluster)
    _, pre_avail = critical_availability(apps, prior)
    pre_revenue = revenue_value(apps, prior)

    failed_state, _ = inject_failure(prior, fraction, seed)
    capacity = failed_state.healthy_capacity()
    outcome, plan_s, sched_s = _run_scheme(scheme, objective if scheme == "triage" else "", apps, failed_state, capacity)
    validate_cluster_state(outcome.state, apps)

    per_app, post_avail = critical_availability(apps, outcome.state)
    post_revenue = revenue_value(apps, outcome.state)
    pos, neg = fairness_deviation(apps, outcome.state, capacity)
    counts = outcome.action_counts
    return EpisodeResult(
        scheme=scheme,
        objective=objective if scheme == "triage" else "",
        failure_frac=fraction,
        seed=seed,
        per_app_availability=per_app,
        availability=post_avail / pre_avail if pre_avail > 0 else 0.0,
        revenue=post_revenue / pre_revenue if pre_revenue > 0 else 0.0,
        pos_dev=pos,
        neg_dev=neg,
        utilization=utilization(apps, outcome.state),
        plan_s=plan_s,
        sched_s=sched_s,
        deletes=counts["delete"],
        migrations=counts["migrate"],
        restarts=counts["restart"],
        dropped=len(outcome.dropped),
    )


@dataclass(frozen=True)
class ReplayPoint:
    t: float
    capacity_fraction: float
    requests_served: float
    availability: float
    revenue: float
    utilization: float


@dataclass(frozen=True)
class ReplayResult:
    scheme: str
    objective: str
    seed: int
    points: tuple[ReplayPoint, ...]
    cumulative_served: float  # request-weight x seconds, delays included


def replay_trace(
    apps: Sequence[Application],
    cluster: ClusterState,
    trace: Sequence[tuple[float, float]],
    scheme: str = "triage",
    objective: str = "fair",
    seed: int = 0,
    *,
    detect_s: float = DEFAULT_DETECT_S,
    act_s: float = DEFAULT_ACT_S,
) -> ReplayResult:
    """Replay a capacity trace of (t_seconds, capacity_fraction) points.

    The failed-server order is fixed by the seed, so capacity changes fail
    and revive nested server prefixes.  At each point the scheme is re-run
    on the carried-forward state; its output takes effect after the
    detection plus action delay, which the cumulative served-weight
    integral accounts for.
    """
    if not trace:
        raise ValueError("trace must contain at least one point")
    prior = cluster if cluster.assignment else initial_placement(apps, cluster)
    _, pre_avail = critical_availability(apps, prior)
    pre_revenue = revenue_value(apps, prior)
    order = _failure_order(prior, seed)

    carried = prior.copy()
    failed_now: set[str] = set()
    points: list[ReplayPoint] = []
    pre_action_served: list[float] = []
    for t, frac in trace:
        if not 0.0 <= frac <= 1.0:
            raise ValueError(f"capacity fraction {frac} at t={t} outside [0, 1]")
        target = _failed_prefix(carried, order, 1.0 - frac)
        carried.mark_healthy(sorted(failed_now - target))
        carried.mark_failed(sorted(target - failed_now))
        failed_now = target
        pre_action_served.append(requests_served(apps, carried))

        capacity = carried.healthy_capacity()
        outcome, _, _ = _run_scheme(scheme, objective if scheme == "triage" else "", apps, carried, capacity)
        validate_cluster_state(outcome.state, apps)
        carried = outcome.state.copy()

        _, avail = critical_availability(apps, carried)
        points.append(ReplayPoint(
            t=t,
            capacity_fraction=frac,
            requests_served=requests_served(apps, carried),
            availability=avail / pre_avail if pre_avail > 0 else 0.0,
            revenue=revenue_value(apps, carried) / pre_revenue if pre_revenue > 0 else 0.0,
            utilization=utilization(apps, carried),
        ))

    delay = detect_s + act_s
    cumulative = 0.0
    for i, point in enumerate(points):
        if i + 1 < len(points):
            dt = points[i + 1].t - point.t
        elif len(points) > 1:
            dt = point.t - points[i - 1].t
        else:
            dt = delay
        lag = min(delay, dt)
        cumulative += pre_action_served[i] * lag + point.requests_served * (dt - lag)
    return ReplayResult(
        scheme=scheme,
        objective=objective if scheme == "triage" else "",
        seed=seed,
        points=tuple(points),
        cumulative_served=cumulative,
    )


def parse_scheme(token: str) -> tuple[str, str]:
    """Parse "scheme" or "scheme:objective" tokens used by sweeps and the CLI."""
    scheme, _, objective = token.partition(":")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if scheme == "triage":
        objective = objective or "fair"
        if objective not in ("cost", "fair"):
            raise ValueError(f"unknown objective {objective!r} for scheme 'triage'")
        return scheme, objective
    if objective:
        raise ValueError(f"scheme {scheme!r} does not take an objective")
    return scheme, ""


def _episode_task(args) -> EpisodeResult:
    apps, prior, fraction, scheme, objective, seed = args
    return run_episode(apps, prior, fraction, scheme, objective or "fair", seed)


def sweep(
    apps: Sequence[Application],
    cluster: ClusterState,
    failure_fracs: Sequence[float],
    schemes: Sequence[str],
    seeds: Sequence[int],
    *,
    jobs: int = 1,
) -> list[EpisodeResult]:
    """Cartesian product of failure levels x schemes x seeds.

    Trials are independent; with jobs > 1 they run in a process pool.
    Results are aggregated in sorted order either way, so the output is
    deterministic.
    """
    prior = cluster if cluster.assignment else initial_placement(apps, cluster)
    tasks = [
        (apps, prior, float(f), *parse_scheme(token), int(seed))
        for token in schemes
        for f in failure_fracs
        for seed in seeds
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_episode_task, tasks, chunksize=1))
    else:
        results = [_episode_task(t) for t in tasks]
    results.sort(key=lambda r: (r.scheme, r.objective, r.failure_frac, r.seed))
    return results


def results_csv(results: Sequence[EpisodeResult], *, include_timing: bool = True) -> str:
    """Render sweep results as CSV.

    With ``include_timing=False`` the wall-clock columns are zeroed, which
    makes the bytes reproducible across runs with the same seeds.
    """
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for r in results:
        writer.writerow([
            r.scheme,
            r.objective,
            f"{r.failure_frac:g}",
            r.seed,
            f"{r.availability:.6f}",
            f"{r.revenue:.6f}",
            f"{r.pos_dev:.6f}",
            f"{r.neg_dev:.6f}",
            f"{r.utilization:.6f}",
            f"{r.plan_s * 1000:.3f}" if include_timing else "0.000",
            f"{r.sched_s * 1000:.3f}" if include_timing else "0.000",
            r.deletes,
            r.migrations,
            r.restarts,
            r.dropped,
        ])
    return out.getvalue()
