"""Non-cooperative comparison schemes: Default, Fair, and Priority.

Default mimics a vanilla cluster scheduler: it restarts failed replicas
first-fit with no notion of criticality, fairness, migration, or
deletion.  Fair enforces per-application water-fill quotas but ignores
criticality tags.  Priority honors tags globally but applies no
per-application quota.
"""

from __future__ import annotations

import heapq
from typing import Sequence

from .model import ActivationPlan, Application, ClusterState, apps_by_id, validate_cluster_state
from .planner import compute_water_fill, priority_estimator
from .scheduler import Action, PackingOutcome, schedule

__all__ = ["baseline_default", "baseline_fair", "baseline_priority"]

_EPS = 1e-9


def _full_plan(apps: Sequence[Application]) -> ActivationPlan:
    entries = [(app.id, ms_id) for app in sorted(apps, key=lambda a: a.id) for ms_id in app.sorted_ids()]
    return ActivationPlan(entries)


def baseline_default(apps: Sequence[Application], prior: ClusterState) -> PackingOutcome:
    """Reschedule missing replicas first-fit over servers in id order.

    No migration, no deletion, no criticality or dependency awareness;
    replicas that do not fit stay pending and their microservices are
    reported as dropped.
    """
    lookup = apps_by_id(apps)
    state = prior.copy()
    servers = [sid for sid, srv in sorted(state.servers.items()) if srv.healthy]
    remaining = {sid: state.servers[sid].capacity for sid in servers}
    for (app_id, ms_id, _), sid in state.assignment.items():
        remaining[sid] -= lookup[app_id].microservices[ms_id].replica_demand

    actions: list[Action] = []
    plan = _full_plan(apps)
    for app_id, ms_id in plan:
        ms = lookup[app_id].microservices[ms_id]
        for r in range(ms.replicas):
            key = (app_id, ms_id, r)
            if key in state.assignment:
                continue
            for sid in servers:
                if remaining[sid] >= ms.replica_demand - _EPS:
                    state.assign(key, sid)
                    remaining[sid] -= ms.replica_demand
                    actions.append(Action("restart", app_id, ms_id, r, to_server=sid))
                    break

    placed: dict[tuple[str, str], int] = {}
    for app_id, ms_id, _ in state.assignment:
        placed[(app_id, ms_id)] = placed.get((app_id, ms_id), 0) + 1
    scheduled = frozenset(
        entry for entry in plan if placed.get(entry, 0) == lookup[entry[0]].microservices[entry[1]].replicas
    )
    validate_cluster_state(state, apps)
    return PackingOutcome(
        state=state,
        scheduled=scheduled,
        dropped=frozenset(plan.rank) - scheduled,
        actions=tuple(actions),
        stop_index=len(plan),
    )


def _topological_order(app: Application) -> list[str]:
    """Dependency-respecting order by microservice id, tags ignored."""
    if app.graph is None:
        return app.sorted_ids()
    indeg = {n: len(app.graph.parents[n]) for n in app.graph.nodes}
    ready = [n for n in sorted(app.graph.nodes) if indeg[n] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        node = heapq.heappop(ready)
        order.append(node)
        for child in app.graph.children[node]:
            indeg[child] -= 1
            if indeg[child] == 0:
                heapq.heappush(ready, child)
    return order


def baseline_fair(apps: Sequence[Application], capacity: float, prior: ClusterState) -> PackingOutcome:
    """Water-fill quotas per application, spent in topological order.

    Each application activates microservices (ignoring tags) until the next
    one would push it past its fair share.  The per-app prefixes are merged
    round-robin and packed with the regular packing routine.
    """
    shares = compute_water_fill({app.id: app.total_demand for app in apps}, capacity)
    per_app: list[list[tuple[str, str]]] = []
    for app in sorted(apps, key=lambda a: a.id):
        used = 0.0
        prefix: list[tuple[str, str]] = []
        for ms_id in _topological_order(app):
            demand = app.microservices[ms_id].demand
            if used + demand > shares[app.id] + _EPS:
                break
            used += demand
            prefix.append((app.id, ms_id))
        per_app.append(prefix)
    entries = []
    for position in range(max((len(p) for p in per_app), default=0)):
        for prefix in per_app:
            if position < len(prefix):
                entries.append(prefix[position])
    return schedule(ActivationPlan(entries), prior, apps)


def baseline_priority(apps: Sequence[Application], capacity: float, prior: ClusterState) -> PackingOutcome:
    """Global criticality order with no per-application quota.

    Per-app priority orders are merged by repeatedly taking the head with
    the smallest (tag, app id, microservice id); the longest prefix whose
    demand fits the capacity is packed.
    """
    lookup = apps_by_id(apps)
    orders = {app.id: priority_estimator(app) for app in apps}
    heads = []
    for app_id in sorted(orders):
        if orders[app_id]:
            ms_id = orders[app_id][0]
            heads.append((lookup[app_id].microservices[ms_id].tag, app_id, ms_id, 0))
    heapq.heapify(heads)
    entries: list[tuple[str, str]] = []
    used = 0.0
    while heads:
        _, app_id, ms_id, idx = heapq.heappop(heads)
        demand = lookup[app_id].microservices[ms_id].demand
        if used + demand > capacity + _EPS:
            break
        used += demand
        entries.append((app_id, ms_id))
        order = orders[app_id]
        if idx + 1 < len(order):
            nxt = order[idx + 1]
            heapq.heappush(heads, (lookup[app_id].microservices[nxt].tag, app_id, nxt, idx + 1))
    return schedule(ActivationPlan(entries), prior, apps)
