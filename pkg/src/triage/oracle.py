"""Exact reference optimizers for desk-scale instances.

``solve_exact`` finds the optimal activation-plus-placement under either
the revenue objective or the water-fill-bounded fairness objective, by
branch and bound over per-application activation subsets with an exact
bin-packing feasibility check.  It is the correctness oracle for the
planner/scheduler heuristics and, by construction, does not scale; that
contrast is part of what the test suite demonstrates.

``solve_coverage`` / ``greedy_coverage`` answer "how much request weight
can k microservices serve", used by frequency-based criticality tagging.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

from .model import Application, ClusterState, ReplicaKey
from .planner import compute_water_fill

__all__ = [
    "BudgetExceededError",
    "ExactSolution",
    "solve_exact",
    "solve_coverage",
    "greedy_coverage",
    "greedy_sequence",
    "coverage_weight",
]

_EPS = 1e-9

DEFAULT_MAX_MICROSERVICES = 16
DEFAULT_MAX_SERVERS = 8
DEFAULT_MAX_COVERAGE_CANDIDATES = 20


class BudgetExceededError(RuntimeError):
    """Instance is too large for exact optimization."""


@dataclass(frozen=True)
class ExactSolution:
    activation: frozenset[tuple[str, str]]
    placement: dict[ReplicaKey, str]
    objective_value: float
    allocations: dict[str, float]
    nodes_explored: int
    solve_time_s: float


def _valid_masks(app: Application) -> tuple[list[str], list[int]]:
    """Enumerate activation subsets satisfying within-app criticality
    dominance and predecessor constraints, as bitmasks over sorted ids."""
    ids = app.sorted_ids()
    n = len(ids)
    index = {m: i for i, m in enumerate(ids)}
    tags = [app.microservices[m].tag for m in ids]
    levels = sorted(set(tags))
    level_mask = {t: 0 for t in levels}
    for i, t in enumerate(tags):
        level_mask[t] |= 1 << i
    pred_mask = [0] * n
    if app.graph is not None:
        for m in ids:
            for p in app.graph.parents[m]:
                pred_mask[index[m]] |= 1 << index[p]
    valid = []
    for mask in range(1 << n):
        ok = True
        present = [t for t in levels if mask & level_mask[t]]
        if present:
            top = present[-1]
            for t in levels:
                if t >= top:
                    break
                if mask & level_mask[t] != level_mask[t]:
                    ok = False
                    break
        if ok:
            for i in range(n):
                if mask >> i & 1 and pred_mask[i] and not (mask & pred_mask[i]):
                    ok = False
                    break
        if ok:
            valid.append(mask)
    return ids, valid


def _pack_exact(items: list[tuple[float, ReplicaKey]], servers: list[tuple[float, str]]) -> Optional[dict[ReplicaKey, str]]:
    """Exact bin-packing feasibility; returns a placement or None.

    Best-fit-decreasing first; falls back to backtracking with symmetry
    breaking over equal-remaining servers and a failed-state memo.
    """
    order = sorted(range(len(items)), key=lambda i: (-items[i][0], items[i][1]))
    rem = [cap for cap, _ in servers]
    assign: list[Optional[int]] = [None] * len(items)

    fitted = 0
    for i in order:
        d = items[i][0]
        best = None
        for b, r in enumerate(rem):
            if r >= d - _EPS and (best is None or r < rem[best]):
                best = b
        if best is None:
            break
        rem[best] -= d
        assign[i] = best
        fitted += 1
    if fitted == len(items):
        return {items[i][1]: servers[b][1] for i, b in enumerate(assign)}

    rem = [cap for cap, _ in servers]
    assign = [None] * len(items)
    failed: set[tuple] = set()

    def backtrack(pos: int) -> bool:
        if pos == len(order):
            return True
        state = (pos, tuple(sorted(round(r, 9) for r in rem)))
        if state in failed:
            return False
        i = order[pos]
        d = items[i][0]
        tried: set[float] = set()
        for b, r in enumerate(rem):
            if r < d - _EPS:
                continue
            rkey = round(r, 9)
            if rkey in tried:
                continue
            tried.add(rkey)
            rem[b] -= d
            assign[i] = b
            if backtrack(pos + 1):
                return True
            rem[b] += d
            assign[i] = None
        failed.add(state)
        return False

    if backtrack(0):
        return {items[i][1]: servers[b][1] for i, b in enumerate(assign)}
    return None


def solve_exact(
    apps: Sequence[Application],
    state: ClusterState,
    objective: Literal["cost", "fair"] = "cost",
    *,
    max_microservices: int = DEFAULT_MAX_MICROSERVICES,
    max_servers: int = DEFAULT_MAX_SERVERS,
) -> ExactSolution:
    """Optimal activation and placement for a desk-scale instance.

    Enforces within-app criticality dominance, predecessor activation
    (skipped for apps without a dependency graph), unique placement, and
    server capacity.  "cost" maximizes revenue
    (sum of price_per_unit * demand over active microservices); "fair"
    maximizes the minimum per-app allocation subject to per-app water-fill
    caps.  Ties are broken toward larger total activated demand, then the
    lexicographically greatest activation vector.
    """
    total_ms = sum(len(app.microservices) for app in apps)
    servers = sorted(
        ((srv.capacity, sid) for sid, srv in state.servers.items() if srv.healthy),
        key=lambda cs: (-cs[0], cs[1]),
    )
    if total_ms > max_microservices:
        raise BudgetExceededError(f"{total_ms} microservices exceed the exact budget of {max_microservices}")
    if len(servers) > max_servers:
        raise BudgetExceededError(f"{len(servers)} servers exceed the exact budget of {max_servers}")
    if objective not in ("cost", "fair"):
        raise ValueError(f"unknown objective {objective!r}")

    start = time.perf_counter()
    apps = sorted(apps, key=lambda a: a.id)
    total_cap = sum(cap for cap, _ in servers)
    fair_caps = None
    if objective == "fair":
        fair_caps = compute_water_fill({app.id: app.total_demand for app in apps}, total_cap)

    # Per-app options: (value, demand, mask, items); the cross-app search
    # picks one option per app.
    options: list[list[tuple[float, float, int, list[tuple[float, ReplicaKey]]]]] = []
    all_ids: list[tuple[str, list[str]]] = []
    for app in apps:
        ids, masks = _valid_masks(app)
        all_ids.append((app.id, ids))
        opts = []
        for mask in masks:
            demand = 0.0
            items: list[tuple[float, ReplicaKey]] = []
            for i, ms_id in enumerate(ids):
                if mask >> i & 1:
                    ms = app.microservices[ms_id]
                    demand += ms.demand
                    items.extend((ms.replica_demand, (app.id, ms_id, r)) for r in range(ms.replicas))
            if fair_caps is not None and demand > fair_caps[app.id] + _EPS:
                continue
            value = app.price_per_unit * demand if objective == "cost" else demand
            opts.append((value, demand, mask, items))
        opts.sort(key=lambda o: (-o[0], -o[1], -o[2]))
        options.append(opts)

    suffix_best = [0.0] * (len(apps) + 1)
    for i in range(len(apps) - 1, -1, -1):
        top = options[i][0][0] if options[i] else 0.0
        suffix_best[i] = suffix_best[i + 1] + top

    def vector(masks: list[int]) -> tuple[int, ...]:
        bits: list[int] = []
        for (app_id, ids), mask in zip(all_ids, masks):
            bits.extend((mask >> i) & 1 for i in range(len(ids)))
        return tuple(bits)

    best_key: Optional[tuple] = None
    best_masks: Optional[list[int]] = None
    best_placement: Optional[dict[ReplicaKey, str]] = None
    nodes = 0
    chosen: list[int] = []
    chosen_opts: list[tuple] = []

    def leaf_value() -> float:
        if objective == "cost":
            return sum(o[0] for o in chosen_opts)
        return min((o[1] for o in chosen_opts), default=0.0)

    def bound(i: int, value_so_far: float, min_so_far: float) -> float:
        if objective == "cost":
            return value_so_far + suffix_best[i]
        future = min(
            (options[j][0][1] if options[j] else 0.0 for j in range(i, len(apps))),
            default=float("inf"),
        )
        return min(min_so_far, future)

    def search(i: int, demand_so_far: float, value_so_far: float, min_so_far: float) -> None:
        nonlocal best_key, best_masks, best_placement, nodes
        nodes += 1
        if best_key is not None and bound(i, value_so_far, min_so_far) < best_key[0] - _EPS:
            return
        if i == len(apps):
            items = [item for o in chosen_opts for item in o[3]]
            key = (leaf_value(), demand_so_far, vector(chosen))
            if best_key is not None and key <= best_key:
                return
            placement = _pack_exact(items, servers)
            if placement is not None:
                best_key, best_masks, best_placement = key, list(chosen), placement
            return
        for opt in options[i]:
            value, demand, mask, _ = opt
            if demand_so_far + demand > total_cap + _EPS:
                continue
            chosen.append(mask)
            chosen_opts.append(opt)
            new_min = min(min_so_far, demand) if objective == "fair" else 0.0
            search(i + 1, demand_so_far + demand, value_so_far + value, new_min)
            chosen.pop()
            chosen_opts.pop()

    search(0, 0.0, 0.0, float("inf"))
    assert best_masks is not None and best_placement is not None  # all-off is always feasible

    activation = set()
    allocations: dict[str, float] = {}
    for (app_id, ids), mask in zip(all_ids, best_masks):
        app = next(a for a in apps if a.id == app_id)
        alloc = 0.0
        for i, ms_id in enumerate(ids):
            if mask >> i & 1:
                activation.add((app_id, ms_id))
                alloc += app.microservices[ms_id].demand
        allocations[app_id] = alloc
    return ExactSolution(
        activation=frozenset(activation),
        placement=best_placement,
        objective_value=best_key[0],
        allocations=allocations,
        nodes_explored=nodes,
        solve_time_s=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# Call-graph coverage.

def _deduped_call_graphs(app: Application) -> list[tuple[frozenset[str], int]]:
    merged: dict[frozenset[str], int] = {}
    for cg in app.call_graphs or ():
        nodes = frozenset(cg.microservice_ids)
        merged[nodes] = merged.get(nodes, 0) + cg.weight
    return sorted(merged.items(), key=lambda kv: (-kv[1], sorted(kv[0])))


def coverage_weight(app: Application, chosen: set[str]) -> int:
    """Total weight of call graphs whose microservices all lie in ``chosen``."""
    return sum(w for nodes, w in _deduped_call_graphs(app) if nodes <= chosen)


def solve_coverage(
    app: Application,
    k: int,
    *,
    max_candidates: int = DEFAULT_MAX_COVERAGE_CANDIDATES,
) -> tuple[frozenset[str], int]:
    """Exact: choose at most k microservices maximizing fully-covered weight."""
    cgs = _deduped_call_graphs(app)
    freq: dict[str, int] = {}
    for nodes, w in cgs:
        for m in nodes:
            freq[m] = freq.get(m, 0) + w
    candidates = sorted(freq, key=lambda m: (-freq[m], m))
    if len(candidates) > max_candidates:
        raise BudgetExceededError(f"{len(candidates)} coverage candidates exceed the exact budget of {max_candidates}")
    index = {m: i for i, m in enumerate(candidates)}
    cg_masks = [(sum(1 << index[m] for m in nodes), w) for nodes, w in cgs]

    best_weight = -1
    best_set: frozenset[str] = frozenset()

    def covered(mask: int) -> int:
        return sum(w for cm, w in cg_masks if cm & ~mask == 0)

    def bound(i: int, included: int, excluded: int, k_left: int) -> int:
        total = 0
        for cm, w in cg_masks:
            if cm & excluded:
                continue
            if (cm & ~included).bit_count() <= k_left:
                total += w
        return total

    def search(i: int, included: int, excluded: int, k_left: int) -> None:
        nonlocal best_weight, best_set
        if i == len(candidates) or k_left == 0:
            value = covered(included)
            if value > best_weight:
                best_weight = value
                best_set = frozenset(candidates[j] for j in range(len(candidates)) if included >> j & 1)
            return
        if bound(i, included, excluded, k_left) <= best_weight:
            return
        search(i + 1, included | (1 << i), excluded, k_left - 1)
        search(i + 1, included, excluded | (1 << i), k_left)

    search(0, 0, 0, min(k, len(candidates)))
    if best_weight < 0:
        best_weight = 0
    return best_set, best_weight


def greedy_sequence(app: Application) -> list[str]:
    """Deterministic microservice sequence for incremental coverage.

    Repeatedly commits the call graph with the highest weight per missing
    microservice (ties: higher weight, then lexicographic node set), adding
    its missing microservices in id order.  Prefixes of this sequence give
    the greedy coverage sets, so coverage is monotone in k.
    """
    cgs = _deduped_call_graphs(app)
    chosen: list[str] = []
    chosen_set: set[str] = set()
    open_cgs = [(set(nodes), tuple(sorted(nodes)), w) for nodes, w in cgs]
    while open_cgs:
        best = min(open_cgs, key=lambda e: (-e[2] / len(e[0]), -e[2], e[1]))
        added = best[0]
        for m in sorted(added):
            chosen.append(m)
            chosen_set.add(m)
        still_open = []
        for miss, nodes_sorted, w in open_cgs:
            if miss & added:
                miss = miss - added
            if miss:
                still_open.append((miss, nodes_sorted, w))
        open_cgs = still_open
    return chosen


def greedy_coverage(app: Application, k: int) -> tuple[frozenset[str], int]:
    """Scalable stand-in for solve_coverage: k-prefix of the greedy sequence."""
    prefix = frozenset(greedy_sequence(app)[:k])
    return prefix, coverage_weight(app, prefix)
