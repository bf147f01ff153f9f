"""Criticality-aware activation planning.

Two stages: per-application priority estimation (criticality plus
dependency-graph order) and global ranking across applications under an
operator objective (revenue or max-min fairness).  The output is an
:class:`~triage.model.ActivationPlan` whose total demand fits the given
capacity.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass
from typing import Literal, Mapping, Optional, Sequence

from .model import ActivationPlan, Application

__all__ = [
    "CostObjective",
    "FairObjective",
    "PlanResult",
    "priority_estimator",
    "compute_water_fill",
    "global_rank",
    "plan",
    "make_objective",
]

# Capacity slack for float accumulation; mirrors model.CAP_EPS.
_EPS = 1e-9


def _traverse_with_events(app: Application, *, literal_descend: bool = False) -> list[tuple[str, str]]:
    """Rank one app's microservices, recording how each was reached.

    Returns (microservice id, how) pairs where ``how`` is "pop" for a
    priority-queue pop and "descend" for a depth-first chain from the
    previously ranked node.  With a dependency graph the frontier queue is
    keyed by (tag, id); a popped node chains into not-yet-ranked children
    that are at least as critical (tag <= its own), deferring the rest to
    the queue.  ``literal_descend`` flips the chain condition to
    tag(child) >= tag(node) for compatibility studies; it can rank
    less-critical descendants ahead of more-critical frontier nodes.
    """
    graph = app.graph
    tags = {m: ms.tag for m, ms in app.microservices.items()}
    if graph is None:
        return [(m, "pop") for m in sorted(app.microservices, key=lambda m: (tags[m], m))]

    events: list[tuple[str, str]] = []
    ranked: set[str] = set()
    queue: list[tuple[int, str]] = [(tags[n], n) for n in graph.sources]
    heapq.heapify(queue)

    def descends(child: str, node: str) -> bool:
        if literal_descend:
            return tags[child] >= tags[node]
        return tags[child] <= tags[node]

    def child_order(node: str):
        return iter(sorted(graph.children[node], key=lambda c: (tags[c], c)))

    while queue:
        _, top = heapq.heappop(queue)
        if top in ranked:
            continue
        ranked.add(top)
        events.append((top, "pop"))
        # Iterative DFS chain; recursion would overflow on deep graphs.
        stack = [child_order(top)]
        chain = [top]
        while stack:
            child = next(stack[-1], None)
            if child is None:
                stack.pop()
                chain.pop()
                continue
            if child in ranked:
                continue
            if descends(child, chain[-1]):
                ranked.add(child)
                events.append((child, "descend"))
                stack.append(child_order(child))
                chain.append(child)
            else:
                heapq.heappush(queue, (tags[child], child))
    return events


def priority_estimator(app: Application, *, literal_descend: bool = False) -> list[str]:
    """Order one application's microservices for activation.

    Without a dependency graph the order is by (tag, id).  With one, a
    best-first frontier traversal emits a prefix-closed order that always
    extends the most critical reachable microservice.
    """
    return [node for node, _ in _traverse_with_events(app, literal_descend=literal_descend)]


def compute_water_fill(demands: Mapping[str, float], capacity: float) -> dict[str, float]:
    """Max-min fair shares: share_i = min(demand_i, f) with the water level f
    chosen so the shares exhaust min(capacity, total demand).

    The level is found exactly by scanning breakpoints of the sorted demand
    profile rather than by bisection.
    """
    if capacity < 0:
        raise ValueError(f"capacity must be >= 0, got {capacity}")
    for app_id, d in demands.items():
        if d < 0:
            raise ValueError(f"demand for {app_id!r} must be >= 0, got {d}")
    if not demands:
        return {}
    target = min(capacity, sum(demands.values()))
    ordered = sorted(demands.values())
    n = len(ordered)
    level = ordered[-1]  # capacity covers every demand unless the scan breaks
    consumed = 0.0
    for i, d in enumerate(ordered):
        if consumed + d * (n - i) >= target:
            level = (target - consumed) / (n - i)
            break
        consumed += d
    return {app_id: min(d, level) for app_id, d in sorted(demands.items())}


class CostObjective:
    """Ranks candidates by application willingness-to-pay, higher first."""

    name = "cost"

    def __init__(self, prices: Mapping[str, float]) -> None:
        self.prices = dict(prices)

    def score(self, app_id: str, demand: float, alloc: Mapping[str, float]) -> tuple:
        return (-self.prices[app_id],)


class FairObjective:
    """Ranks candidates by deviation from the water-fill fair share.

    The key is the application's relative deviation from its share if the
    candidate were activated, signed so applications furthest below their
    share win (lower first).  Relative rather than absolute deviation:
    otherwise crumbs added to an already-saturated application outscore a
    deprived application's next microservice and starve it.  Ties prefer
    the application currently furthest below its share.
    """

    name = "fair"

    def __init__(self, fair_shares: Mapping[str, float]) -> None:
        self.fair_shares = dict(fair_shares)

    def score(self, app_id: str, demand: float, alloc: Mapping[str, float]) -> tuple:
        share = self.fair_shares[app_id]
        used = alloc.get(app_id, 0.0)
        if share <= 0:
            return (float("inf"), 0.0)
        return ((used + demand - share) / share, -(share - used))


def global_rank(
    app_ranks: Sequence[tuple[Application, Sequence[str]]],
    objective: CostObjective | FairObjective,
    capacity: float,
    *,
    skip_unplaceable: bool = False,
) -> ActivationPlan:
    """Merge per-app priority orders into one plan within ``capacity``.

    A priority queue holds at most one candidate per application (the head
    of its remaining order) keyed by the objective score, tie-broken by
    (app id, microservice id).  The default stops at the first candidate
    whose demand exceeds the remaining capacity; with
    ``skip_unplaceable=True`` that application's remainder is dropped and
    ranking continues with the other applications, so heterogeneous demands
    do not strand capacity.
    """
    remaining = capacity
    alloc: dict[str, float] = {}
    entries: list[tuple[str, str]] = []
    scores: list[tuple] = []

    heads: list[tuple[tuple, str, str, int]] = []  # (score, app_id, ms_id, index into rank)
    ranks: dict[str, Sequence[str]] = {}
    apps: dict[str, Application] = {}
    for app, order in app_ranks:
        apps[app.id] = app
        ranks[app.id] = order
        if order:
            ms_id = order[0]
            demand = app.microservices[ms_id].demand
            heads.append((objective.score(app.id, demand, alloc), app.id, ms_id, 0))
    heapq.heapify(heads)

    while heads:
        score, app_id, ms_id, idx = heapq.heappop(heads)
        demand = apps[app_id].microservices[ms_id].demand
        if demand > remaining + _EPS:
            if not skip_unplaceable:
                break
            continue  # drop this app's remainder; later heads of other apps may still fit
        remaining -= demand
        alloc[app_id] = alloc.get(app_id, 0.0) + demand
        entries.append((app_id, ms_id))
        scores.append(score)
        order = ranks[app_id]
        if idx + 1 < len(order):
            nxt = order[idx + 1]
            nxt_demand = apps[app_id].microservices[nxt].demand
            heapq.heappush(heads, (objective.score(app_id, nxt_demand, alloc), app_id, nxt, idx + 1))
    return ActivationPlan(entries, scores)


def make_objective(name: Literal["cost", "fair"], apps: Sequence[Application], capacity: float) -> CostObjective | FairObjective:
    """Build an operator objective; "fair" precomputes water-fill shares."""
    if name == "cost":
        return CostObjective({app.id: app.price_per_unit for app in apps})
    if name == "fair":
        shares = compute_water_fill({app.id: app.total_demand for app in apps}, capacity)
        return FairObjective(shares)
    raise ValueError(f"unknown objective {name!r}; expected 'cost' or 'fair'")


@dataclass(frozen=True)
class PlanResult:
    plan: ActivationPlan
    objective: str
    capacity: float
    duration_s: float
    fair_shares: Optional[dict[str, float]] = None


def plan(
    apps: Sequence[Application],
    capacity: float,
    objective: Literal["cost", "fair"] = "fair",
    *,
    skip_unplaceable: bool = False,
    literal_descend: bool = False,
) -> PlanResult:
    """Full planning pass: priority estimation per app, then global ranking.

    Stateless: call it from scratch at every failure event.  Wall-clock
    planning time is recorded on the result.
    """
    start = time.perf_counter()
    obj = make_objective(objective, apps, capacity)
    app_ranks = [(app, priority_estimator(app, literal_descend=literal_descend)) for app in apps]
    activation = global_rank(app_ranks, obj, capacity, skip_unplaceable=skip_unplaceable)
    duration = time.perf_counter() - start
    shares = obj.fair_shares if isinstance(obj, FairObjective) else None
    return PlanResult(plan=activation, objective=objective, capacity=capacity, duration_s=duration, fair_shares=shares)
