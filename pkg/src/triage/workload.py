"""Synthetic workload generation: dependency graphs, call graphs, resource
models, and criticality tagging.

The generator reproduces the qualitative shape of large production
microservice traces: application sizes are long-tailed, call graphs are
small subsets of the dependency graph with Zipf-distributed request
weights, and a small core of hot microservices serves most requests.
Everything is seeded and deterministic; applications draw from spawned
seed streams so they can be generated in parallel.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import Application, CallGraph, ClusterState, DependencyGraph, Microservice, ServerNode
from . import oracle

__all__ = [
    "GenSpec",
    "generate_workload",
    "assign_resources_cpm",
    "assign_resources_longtailed",
    "tag_service_level",
    "tag_frequency_based",
    "read_frequencies_csv",
    "make_cluster",
    "capacity_for_utilization",
    "call_frequencies",
    "alibaba_like_spec",
    "genspec_from_json",
]

RESOURCE_MODELS = ("cpm", "longtailed")
TAGGING_SCHEMES = ("service_p50", "service_p90", "freq_p50", "freq_p90", "none")


@dataclass(frozen=True)
class GenSpec:
    """Knobs for one synthetic workload."""

    seed: int = 0
    n_apps: int = 10
    size_range: tuple[int, int] = (10, 100)
    long_tailed_sizes: bool = True
    sizes: Optional[tuple[int, ...]] = None  # explicit per-app sizes, overrides size_range
    source_fraction: float = 0.08
    max_fanout: int = 4
    depth: int = 6
    call_graphs_per_app: int = 400
    requests_per_app: int = 100_000
    cg_size_sigma: float = 0.8
    zipf_weight_exponent: float = 1.2
    zipf_node_exponent: float = 1.1
    resource_model: str = "cpm"
    cpm_scale: Optional[float] = None  # None: auto-scale per app from cpm_hot_to_floor
    cpm_hot_to_floor: float = 1.5  # ratio of call-driven demand mass to floor mass
    demand_floor: float = 0.1
    lognormal_sigma: float = 1.0
    tagging: str = "service_p90"
    epsilon: float = 0.01
    price_range: tuple[float, float] = (1.0, 10.0)
    price_volume_discount: float = 0.0  # >0: unit price falls with app demand (bulk discount)
    replica_range: tuple[int, int] = (1, 1)
    replica_demand_target: Optional[float] = None  # horizontal scaling: one replica per ~this much demand

    def __post_init__(self) -> None:
        if self.n_apps < 1:
            raise ValueError("n_apps must be >= 1")
        if self.sizes is not None and len(self.sizes) != self.n_apps:
            raise ValueError("sizes must list one size per app")
        if not (1 <= self.size_range[0] <= self.size_range[1]):
            raise ValueError("size_range must be 1 <= lo <= hi")
        if not (0.0 <= self.epsilon <= 0.1):
            raise ValueError("epsilon must lie in [0, 0.1]")
        if not (1 <= self.replica_range[0] <= self.replica_range[1]):
            raise ValueError("replica_range must be 1 <= lo <= hi")
        if self.resource_model not in RESOURCE_MODELS:
            raise ValueError(f"resource_model must be one of {RESOURCE_MODELS}")
        if self.tagging not in TAGGING_SCHEMES:
            raise ValueError(f"tagging must be one of {TAGGING_SCHEMES}")
        for name in ("source_fraction", "max_fanout", "depth", "call_graphs_per_app",
                     "requests_per_app", "cpm_hot_to_floor", "demand_floor", "lognormal_sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.cpm_scale is not None and self.cpm_scale <= 0:
            raise ValueError("cpm_scale must be positive")


def _zipf_weights(n: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=float)
    w = ranks ** -exponent
    return w / w.sum()


def _build_dag(size: int, spec: GenSpec, rng: np.random.Generator) -> tuple[list[str], list[tuple[str, str]], np.ndarray]:
    """Layered random DAG plus a per-node popularity distribution.

    Popular nodes attract more edges, which later concentrates call graphs
    on a hot core.
    """
    # Shuffled id labels: service names carry no topological information,
    # so id-ordered traversals are genuinely tag- and layer-blind.
    labels = rng.permutation(size)
    ids = [f"m{labels[i]:04d}" for i in range(size)]
    n_src = max(1, round(size * spec.source_fraction))
    depth = max(2, min(spec.depth, size)) if size > n_src else 1
    layer_of = np.zeros(size, dtype=int)
    if size > n_src:
        layer_of[n_src:] = rng.integers(1, depth, size=size - n_src)
        # Every layer up to the deepest used one must be populated so chains exist.
        used = np.sort(np.unique(layer_of[n_src:]))
        remap = {old: new + 1 for new, old in enumerate(used)}
        layer_of[n_src:] = [remap[v] for v in layer_of[n_src:]]
    popularity = _zipf_weights(size, spec.zipf_node_exponent)
    popularity = popularity[rng.permutation(size)]

    edges: list[tuple[str, str]] = []
    by_layer: dict[int, list[int]] = {}
    for i, layer in enumerate(layer_of):
        by_layer.setdefault(int(layer), []).append(i)
    max_layer = max(by_layer)
    earlier: list[int] = list(by_layer[0])
    for layer in range(1, max_layer + 1):
        pool = np.array(earlier)
        pool_w = popularity[pool]
        pool_w = pool_w / pool_w.sum()
        for i in by_layer[layer]:
            n_parents = 1 + rng.binomial(spec.max_fanout - 1, 0.25) if spec.max_fanout > 1 else 1
            n_parents = min(n_parents, len(pool))
            parents = rng.choice(pool, size=n_parents, replace=False, p=pool_w)
            edges.extend((ids[int(p)], ids[i]) for p in parents)
        earlier.extend(by_layer[layer])
    return ids, edges, popularity


def _build_call_graphs(
    ids: list[str],
    children: dict[str, tuple[str, ...]],
    sources: Sequence[str],
    popularity: np.ndarray,
    spec: GenSpec,
    rng: np.random.Generator,
) -> list[CallGraph]:
    """Call graphs as popularity-biased walks from popularity-biased entries.

    Sizes are long-tailed (most below ten nodes); weights follow a Zipf law
    over call-graph types.  The entry node is always first in the node
    tuple, which defines the "service" a call graph belongs to.
    """
    size = len(ids)
    n_types = min(spec.call_graphs_per_app, max(3, size // 2))
    index = {m: i for i, m in enumerate(ids)}
    src_pop = np.array([popularity[index[s]] for s in sources])
    src_pop = src_pop / src_pop.sum()
    type_weights = _zipf_weights(n_types, spec.zipf_weight_exponent) * spec.requests_per_app

    call_graphs: list[CallGraph] = []
    for t in range(n_types):
        target = 1 + int(rng.lognormal(mean=1.0, sigma=spec.cg_size_sigma))
        target = min(target, size)
        entry = sources[int(rng.choice(len(sources), p=src_pop))]
        nodes = [entry]
        chosen = {entry}
        frontier = [c for c in children[entry] if c not in chosen]
        while len(nodes) < target and frontier:
            w = np.array([popularity[index[c]] for c in frontier])
            nxt = frontier[int(rng.choice(len(frontier), p=w / w.sum()))]
            nodes.append(nxt)
            chosen.add(nxt)
            frontier = [c for c in frontier if c != nxt]
            frontier.extend(c for c in children[nxt] if c not in chosen and c not in frontier)
        weight = max(1, int(round(type_weights[t])))
        call_graphs.append(CallGraph(tuple(nodes), weight))
    return call_graphs


def call_frequencies(app: Application) -> dict[str, float]:
    """Calls per microservice: total weight of the call graphs that use it."""
    freq = {m: 0.0 for m in app.microservices}
    for cg in app.call_graphs or ():
        for m in cg.microservice_ids:
            freq[m] += cg.weight
    return freq


def assign_resources_cpm(app: Application, calls_per_minute: dict[str, float], scale: float, *, floor: float = 0.1) -> Application:
    """Demand proportional to call rate, floored so idle microservices still
    cost capacity."""
    if any(v < 0 for v in calls_per_minute.values()):
        raise ValueError("calls_per_minute must be >= 0")
    demands = {m: max(scale * calls_per_minute.get(m, 0.0), floor) for m in app.microservices}
    return app.with_demands(demands)


def assign_resources_longtailed(app: Application, seed: int, *, sigma: float = 1.0, target_total: Optional[float] = None) -> Application:
    """Demands drawn from a lognormal, normalized to the app's target total."""
    rng = np.random.default_rng(seed)
    ids = app.sorted_ids()
    raw = rng.lognormal(mean=0.0, sigma=sigma, size=len(ids))
    if target_total is None:
        target_total = float(len(ids))
    scale = target_total / raw.sum()
    return app.with_demands({m: float(r * scale) for m, r in zip(ids, raw)})


def _services(app: Application) -> dict[str, list[CallGraph]]:
    """Group call graphs by entry node (the first microservice listed)."""
    groups: dict[str, list[CallGraph]] = {}
    for cg in app.call_graphs or ():
        groups.setdefault(cg.microservice_ids[0], []).append(cg)
    return groups


def _quartile_tags(app: Application, critical: set[str]) -> dict[str, int]:
    """C1 for the critical set; the rest get C2..C5 by frequency quartile."""
    freq = call_frequencies(app)
    tags = {m: 1 for m in critical}
    rest = sorted((m for m in app.microservices if m not in critical), key=lambda m: (-freq[m], m))
    if rest:
        chunk = math.ceil(len(rest) / 4)
        for i, m in enumerate(rest):
            tags[m] = 2 + min(i // chunk, 3)
    return tags


def _promote_epsilon(app: Application, critical: set[str], epsilon: float, rng: np.random.Generator) -> set[str]:
    # Rarely-invoked services can still be essential (housekeeping jobs);
    # promote a small random sample of the leftovers.
    services = _services(app)
    leftovers = sorted(e for e in services if not concat_nodes(services[e]) <= critical)
    n_promote = int(round(epsilon * len(services)))
    if n_promote == 0 or not leftovers:
        return critical
    picks = rng.choice(len(leftovers), size=min(n_promote, len(leftovers)), replace=False)
    promoted = set(critical)
    for p in sorted(picks):
        promoted |= concat_nodes(services[leftovers[int(p)]])
    return promoted


def concat_nodes(cgs: Sequence[CallGraph]) -> set[str]:
    nodes: set[str] = set()
    for cg in cgs:
        nodes.update(cg.microservice_ids)
    return nodes


def tag_service_level(app: Application, percentile: float, epsilon: float, seed: int = 0) -> Application:
    """Tag C1 the union of the most-invoked services covering ``percentile``
    percent of request weight, plus an epsilon sample of the rest."""
    if not app.call_graphs:
        raise ValueError(f"app {app.id!r} has no call graphs to derive tags from")
    services = _services(app)
    weights = {entry: sum(cg.weight for cg in cgs) for entry, cgs in services.items()}
    total = sum(weights.values())
    target = percentile / 100.0 * total
    critical: set[str] = set()
    covered = 0
    for entry in sorted(services, key=lambda e: (-weights[e], e)):
        if covered >= target:
            break
        covered += weights[entry]
        critical |= concat_nodes(services[entry])
    rng = np.random.default_rng(seed)
    critical = _promote_epsilon(app, critical, epsilon, rng)
    return app.with_tags(_quartile_tags(app, critical))


def tag_frequency_based(app: Application, percentile: float, epsilon: float, seed: int = 0) -> Application:
    """Tag C1 the smallest microservice set that fully serves ``percentile``
    percent of request weight (exact when within the oracle budget, greedy
    otherwise), plus an epsilon sample of leftover services."""
    if not app.call_graphs:
        raise ValueError(f"app {app.id!r} has no call graphs to derive tags from")
    total = sum(cg.weight for cg in app.call_graphs)
    target = percentile / 100.0 * total
    freq = {m for cg in app.call_graphs for m in cg.microservice_ids}
    critical: set[str] = set()
    if target > 0:
        if len(freq) <= oracle.DEFAULT_MAX_COVERAGE_CANDIDATES:
            for k in range(1, len(freq) + 1):
                chosen, weight = oracle.solve_coverage(app, k)
                if weight >= target:
                    critical = set(chosen)
                    break
        else:
            sequence = oracle.greedy_sequence(app)
            critical = set(_greedy_prefix_for_target(app, sequence, target))
    rng = np.random.default_rng(seed)
    critical = _promote_epsilon(app, critical, epsilon, rng)
    return app.with_tags(_quartile_tags(app, critical))


def _greedy_prefix_for_target(app: Application, sequence: Sequence[str], target: float) -> list[str]:
    remaining = {i: len(set(cg.microservice_ids)) for i, cg in enumerate(app.call_graphs)}
    members: dict[str, list[int]] = {}
    for i, cg in enumerate(app.call_graphs):
        for m in set(cg.microservice_ids):
            members.setdefault(m, []).append(i)
    covered = 0.0
    prefix: list[str] = []
    for m in sequence:
        if covered >= target:
            break
        prefix.append(m)
        for i in members.get(m, ()):
            remaining[i] -= 1
            if remaining[i] == 0:
                covered += app.call_graphs[i].weight
    return prefix


def _generate_app(app_id: str, size: int, price: float, spec: GenSpec, seed: np.random.SeedSequence) -> Application:
    rng = np.random.default_rng(seed)
    ids, edges, popularity = _build_dag(size, spec, rng)
    microservices = {m: Microservice(id=m, demand=1.0) for m in ids}
    graph = DependencyGraph(ids, edges, owner=app_id)
    call_graphs = _build_call_graphs(ids, graph.children, graph.sources, popularity, spec, rng)
    app = Application(
        id=app_id,
        microservices=microservices,
        graph=graph,
        price_per_unit=price,
        call_graphs=tuple(call_graphs),
    )

    if spec.resource_model == "cpm":
        freq = call_frequencies(app)
        scale = spec.cpm_scale
        if scale is None:
            # Size the call-driven demand mass relative to the floor mass so
            # hot microservices dominate without dwarfing everything else.
            total_freq = sum(freq.values())
            scale = spec.cpm_hot_to_floor * spec.demand_floor * size / max(total_freq, 1.0)
        app = assign_resources_cpm(app, freq, scale, floor=spec.demand_floor)
    else:
        app = assign_resources_longtailed(
            app, int(rng.integers(0, 2**31)), sigma=spec.lognormal_sigma, target_total=float(size)
        )
    if spec.replica_demand_target is not None:
        target = spec.replica_demand_target
        app = app.with_replicas({m: max(1, math.ceil(ms.demand / target)) for m, ms in app.microservices.items()})
    else:
        lo, hi = spec.replica_range
        if hi > 1:
            app = app.with_replicas({m: int(r) for m, r in zip(ids, rng.integers(lo, hi + 1, size=len(ids)))})

    tag_seed = int(rng.integers(0, 2**31))
    if spec.tagging.startswith("service_p"):
        app = tag_service_level(app, float(spec.tagging.removeprefix("service_p")), spec.epsilon, tag_seed)
    elif spec.tagging.startswith("freq_p"):
        app = tag_frequency_based(app, float(spec.tagging.removeprefix("freq_p")), spec.epsilon, tag_seed)
    return app


def generate_workload(spec: GenSpec) -> list[Application]:
    """Generate a seeded, deterministic list of applications."""
    root = np.random.SeedSequence(spec.seed)
    master_seed, *app_seeds = root.spawn(spec.n_apps + 1)
    master = np.random.default_rng(master_seed)
    lo, hi = spec.size_range
    if spec.sizes is not None:
        sizes = list(spec.sizes)
    elif spec.long_tailed_sizes:
        sizes = [int(round(math.exp(u))) for u in master.uniform(math.log(lo), math.log(hi + 1), size=spec.n_apps)]
        sizes = [min(max(s, lo), hi) for s in sizes]
    else:
        sizes = [int(s) for s in master.integers(lo, hi + 1, size=spec.n_apps)]
    prices = master.uniform(spec.price_range[0], spec.price_range[1], size=spec.n_apps)
    width = max(2, len(str(spec.n_apps - 1)))
    apps = [
        _generate_app(f"app{i:0{width}d}", sizes[i], float(round(prices[i], 4)), spec, app_seeds[i])
        for i in range(spec.n_apps)
    ]
    if spec.price_volume_discount > 0:
        # Bulk tenants negotiate lower unit prices; scale against the median app.
        from dataclasses import replace
        demands = sorted(app.total_demand for app in apps)
        median = demands[len(demands) // 2] or 1.0
        apps = [
            replace(app, price_per_unit=round(app.price_per_unit * (median / max(app.total_demand, 1e-9)) ** spec.price_volume_discount, 4))
            for app in apps
        ]
    return apps


def read_frequencies_csv(text: str | bytes) -> dict[str, float]:
    """Parse the optional (ms_id, cpm) CSV accepted alongside workloads."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    out: dict[str, float] = {}
    for row in csv.reader(io.StringIO(text)):
        if not row or row[0].strip().lower() in ("ms_id", "microservice"):
            continue
        out[row[0].strip()] = float(row[1])
    return out


def make_cluster(n_servers: int, capacity: float) -> ClusterState:
    """Homogeneous cluster with zero-padded server ids."""
    width = max(4, len(str(n_servers - 1)))
    servers = {f"s{i:0{width}d}": ServerNode(id=f"s{i:0{width}d}", capacity=capacity) for i in range(n_servers)}
    return ClusterState(servers)


def standard_ensemble_spec(seed: int = 0, **overrides) -> GenSpec:
    """The standard synthetic ensemble used by the comparison benchmarks.

    A dozen applications with long-tailed sizes (one dominant app owning
    roughly half the demand), call-rate-proportional demands with
    horizontal scaling, and service-level P90 tagging.  Paired with
    :func:`standard_ensemble_cluster`.
    """
    sizes = (400, 90, 80, 70, 60, 55, 50, 45, 40, 35, 30, 16)
    params = dict(
        seed=seed,
        n_apps=len(sizes),
        sizes=sizes,
        size_range=(16, 400),
        resource_model="cpm",
        cpm_hot_to_floor=3.0,
        tagging="service_p90",
        replica_demand_target=0.3,
        price_volume_discount=1.0,
    )
    params.update(overrides)
    return GenSpec(**params)


def standard_ensemble_cluster(apps: Sequence[Application], n_servers: int = 120,
                              utilization: float = 0.93) -> ClusterState:
    """Cluster for the standard ensemble: high enough baseline utilization
    that every studied failure level is a genuine capacity crunch."""
    return make_cluster(n_servers, capacity_for_utilization(apps, n_servers, utilization))


def alibaba_like_spec(seed: int = 0, **overrides) -> GenSpec:
    """The stock 18-app benchmark workload: long-tailed app sizes from 10 to
    3000 microservices, call-rate-proportional demands, service-level P90
    tagging."""
    sizes = (3000, 1200, 600, 400, 300, 240, 200, 160, 130, 100, 80, 60, 50, 40, 30, 20, 15, 10)
    params = dict(
        seed=seed,
        n_apps=len(sizes),
        sizes=sizes,
        size_range=(10, 3000),
        resource_model="cpm",
        tagging="service_p90",
    )
    params.update(overrides)
    return GenSpec(**params)


def genspec_from_json(doc: dict) -> GenSpec:
    """Build a GenSpec from its JSON form (lists become tuples)."""
    coerced = dict(doc)
    for key in ("size_range", "price_range", "replica_range"):
        if key in coerced and coerced[key] is not None:
            coerced[key] = tuple(coerced[key])
    if coerced.get("sizes") is not None:
        coerced["sizes"] = tuple(int(s) for s in coerced["sizes"])
    return GenSpec(**coerced)


def capacity_for_utilization(apps: Sequence[Application], n_servers: int, target_utilization: float) -> float:
    """Per-server capacity so the workload fills ``target_utilization`` of the
    cluster, but never below the largest single replica."""
    if not 0 < target_utilization <= 1:
        raise ValueError("target_utilization must lie in (0, 1]")
    total = sum(app.total_demand for app in apps)
    cap = total / (n_servers * target_utilization)
    biggest = max(
        (ms.replica_demand for app in apps for ms in app.microservices.values()),
        default=0.0,
    )
    return max(cap, biggest * 1.01)
