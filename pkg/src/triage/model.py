"""Domain model: workloads, clusters, plans, and their JSON serialization.

Demands are abstract scalar resource units.  A microservice's ``demand`` is
the total across its replicas; each replica consumes ``demand / replicas``.
Criticality tags are positive integers with 1 the most critical; untagged
microservices default to 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, Optional, Sequence

__all__ = [
    "ParseError",
    "ValidationError",
    "Microservice",
    "CallGraph",
    "DependencyGraph",
    "Application",
    "ServerNode",
    "ClusterState",
    "ActivationPlan",
    "ReplicaKey",
    "load_workload",
    "save_workload",
    "load_cluster",
    "save_cluster",
    "validate_cluster_state",
    "active_microservices",
    "apps_by_id",
]

# Tolerance for capacity comparisons on accumulated float demands.
CAP_EPS = 1e-9

DEFAULT_TAG = 1

#: (app id, microservice id, replica index) -- the unit of placement.
ReplicaKey = tuple[str, str, int]


class ParseError(ValueError):
    """Raised for malformed workload/cluster documents."""


class ValidationError(ValueError):
    """Raised when a structurally valid document violates a model invariant."""


@dataclass(frozen=True)
class Microservice:
    """One microservice of an application."""

    id: str
    demand: float
    tag: int = DEFAULT_TAG
    replicas: int = 1

    def __post_init__(self) -> None:
        if self.demand < 0:
            raise ValidationError(f"microservice {self.id!r}: demand must be >= 0, got {self.demand}")
        if self.tag < 1:
            raise ValidationError(f"microservice {self.id!r}: tag must be >= 1, got {self.tag}")
        if self.replicas < 1:
            raise ValidationError(f"microservice {self.id!r}: replicas must be >= 1, got {self.replicas}")

    @property
    def replica_demand(self) -> float:
        return self.demand / self.replicas


@dataclass(frozen=True)
class CallGraph:
    """The microservices exercised by one class of user request.

    ``weight`` is the number of requests this call graph represents.
    """

    microservice_ids: tuple[str, ...]
    weight: int

    def __post_init__(self) -> None:
        if not self.microservice_ids:
            raise ValidationError("call graph must name at least one microservice")
        if self.weight < 1:
            raise ValidationError(f"call graph weight must be >= 1, got {self.weight}")


class DependencyGraph:
    """Caller-to-callee DAG over an application's microservice ids.

    Construction rejects cyclic inputs and dangling edge endpoints.
    Children and sources are kept in sorted order so traversals are
    deterministic.
    """

    def __init__(self, nodes: Iterable[str], edges: Iterable[tuple[str, str]], *, owner: str = "") -> None:
        self.nodes: frozenset[str] = frozenset(nodes)
        seen: set[tuple[str, str]] = set()
        for caller, callee in edges:
            for end in (caller, callee):
                if end not in self.nodes:
                    raise ValidationError(f"app {owner!r}: edge endpoint {end!r} is not a microservice")
            seen.add((caller, callee))
        self.edges: tuple[tuple[str, str], ...] = tuple(sorted(seen))
        children: dict[str, list[str]] = {n: [] for n in self.nodes}
        parents: dict[str, list[str]] = {n: [] for n in self.nodes}
        for caller, callee in self.edges:
            children[caller].append(callee)
            parents[callee].append(caller)
        self.children: dict[str, tuple[str, ...]] = {n: tuple(sorted(c)) for n, c in children.items()}
        self.parents: dict[str, tuple[str, ...]] = {n: tuple(sorted(p)) for n, p in parents.items()}
        self.sources: tuple[str, ...] = tuple(sorted(n for n in self.nodes if not parents[n]))
        cycle = self._find_cycle()
        if cycle is not None:
            raise ValidationError(f"app {owner!r}: dependency graph has a cycle: {' -> '.join(cycle)}")

    def _find_cycle(self) -> Optional[list[str]]:
        # Kahn's algorithm; any nodes left over sit on or behind a cycle.
        indeg = {n: len(self.parents[n]) for n in self.nodes}
        queue = [n for n in self.nodes if indeg[n] == 0]
        done = 0
        while queue:
            n = queue.pop()
            done += 1
            for c in self.children[n]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    queue.append(c)
        if done == len(self.nodes):
            return None
        # Walk within the leftover nodes until a repeat closes the cycle.
        leftover = {n for n in self.nodes if indeg[n] > 0}
        node = min(leftover)
        path: list[str] = []
        seen: dict[str, int] = {}
        while node not in seen:
            seen[node] = len(path)
            path.append(node)
            node = min(c for c in self.children[node] if c in leftover)
        return path[seen[node]:] + [node]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, DependencyGraph) and self.nodes == other.nodes and self.edges == other.edges

    def __hash__(self) -> int:
        return hash((self.nodes, self.edges))

    def __repr__(self) -> str:
        return f"DependencyGraph({len(self.nodes)} nodes, {len(self.edges)} edges)"


@dataclass(frozen=True)
class Application:
    """A microservice application with optional dependency and call graphs."""

    id: str
    microservices: Mapping[str, Microservice]
    graph: Optional[DependencyGraph] = None
    price_per_unit: float = 1.0
    call_graphs: Optional[tuple[CallGraph, ...]] = None

    def __post_init__(self) -> None:
        if self.price_per_unit < 0:
            raise ValidationError(f"app {self.id!r}: price_per_unit must be >= 0")
        for ms_id, ms in self.microservices.items():
            if ms_id != ms.id:
                raise ValidationError(f"app {self.id!r}: microservice map key {ms_id!r} != id {ms.id!r}")
        if self.graph is not None and self.graph.nodes != frozenset(self.microservices):
            raise ValidationError(f"app {self.id!r}: dependency graph nodes do not match microservices")
        if self.call_graphs:
            for cg in self.call_graphs:
                for node in cg.microservice_ids:
                    if node not in self.microservices:
                        raise ValidationError(f"app {self.id!r}: call graph names unknown microservice {node!r}")
        # Canonical id order makes downstream tie-breaks reproducible.
        object.__setattr__(
            self, "microservices", dict(sorted(self.microservices.items()))
        )

    @property
    def total_demand(self) -> float:
        return sum(ms.demand for ms in self.microservices.values())

    def sorted_ids(self) -> list[str]:
        return list(self.microservices)

    def with_demands(self, demands: Mapping[str, float]) -> "Application":
        """Copy of this app with per-microservice demands replaced."""
        new = {m: replace(ms, demand=demands.get(m, ms.demand)) for m, ms in self.microservices.items()}
        return replace(self, microservices=new)

    def with_tags(self, tags: Mapping[str, int]) -> "Application":
        """Copy of this app with per-microservice tags replaced."""
        new = {m: replace(ms, tag=tags.get(m, ms.tag)) for m, ms in self.microservices.items()}
        return replace(self, microservices=new)

    def with_replicas(self, replicas: Mapping[str, int]) -> "Application":
        """Copy of this app with per-microservice replica counts replaced."""
        new = {m: replace(ms, replicas=replicas.get(m, ms.replicas)) for m, ms in self.microservices.items()}
        return replace(self, microservices=new)


@dataclass(frozen=True)
class ServerNode:
    id: str
    capacity: float
    healthy: bool = True

    def __post_init__(self) -> None:
        if self.capacity < 0:
            raise ValidationError(f"server {self.id!r}: capacity must be >= 0")


class ClusterState:
    """Servers plus the replica-to-server assignment.

    The only mutable model type.  Mutations go through :meth:`assign`,
    :meth:`unassign`, and :meth:`mark_failed`, which keep per-server loads
    consistent; full invariant checking is done by
    :func:`validate_cluster_state`.
    """

    def __init__(self, servers: Mapping[str, ServerNode], assignment: Optional[Mapping[ReplicaKey, str]] = None) -> None:
        self.servers: dict[str, ServerNode] = dict(sorted(servers.items()))
        for sid, srv in self.servers.items():
            if sid != srv.id:
                raise ValidationError(f"server map key {sid!r} != id {srv.id!r}")
        self.assignment: dict[ReplicaKey, str] = {}
        if assignment:
            for key, sid in assignment.items():
                self.assign(key, sid)

    def assign(self, key: ReplicaKey, server_id: str) -> None:
        srv = self.servers.get(server_id)
        if srv is None:
            raise ValidationError(f"assignment of {key} to unknown server {server_id!r}")
        if not srv.healthy:
            raise ValidationError(f"assignment of {key} to unhealthy server {server_id!r}")
        if key in self.assignment:
            raise ValidationError(f"replica {key} is already placed")
        self.assignment[key] = server_id

    def unassign(self, key: ReplicaKey) -> str:
        return self.assignment.pop(key)

    def mark_failed(self, server_ids: Iterable[str]) -> list[ReplicaKey]:
        """Mark servers unhealthy and clear their assignments.

        Returns the replica keys that lost their placement.
        """
        failed = set(server_ids)
        for sid in failed:
            self.servers[sid] = replace(self.servers[sid], healthy=False)
        lost = sorted(k for k, sid in self.assignment.items() if sid in failed)
        for key in lost:
            del self.assignment[key]
        return lost

    def mark_healthy(self, server_ids: Iterable[str]) -> None:
        for sid in server_ids:
            self.servers[sid] = replace(self.servers[sid], healthy=True)

    def healthy_capacity(self) -> float:
        return sum(s.capacity for s in self.servers.values() if s.healthy)

    def total_capacity(self) -> float:
        return sum(s.capacity for s in self.servers.values())

    def server_loads(self, apps: Mapping[str, Application]) -> dict[str, float]:
        loads = {sid: 0.0 for sid in self.servers}
        for (app_id, ms_id, _), sid in self.assignment.items():
            loads[sid] += apps[app_id].microservices[ms_id].replica_demand
        return loads

    def copy(self) -> "ClusterState":
        dup = ClusterState.__new__(ClusterState)
        dup.servers = dict(self.servers)
        dup.assignment = dict(self.assignment)
        return dup

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, ClusterState)
            and self.servers == other.servers
            and self.assignment == other.assignment
        )

    def __repr__(self) -> str:
        healthy = sum(1 for s in self.servers.values() if s.healthy)
        return f"ClusterState({healthy}/{len(self.servers)} healthy, {len(self.assignment)} replicas placed)"


class ActivationPlan:
    """Globally ordered list of (app id, microservice id) pairs to enable.

    Immutable once built; exposes a set view for membership tests and a
    rank index for ordering queries.  ``scores`` optionally carries the
    objective key under which each entry was admitted (for export).
    """

    def __init__(self, entries: Iterable[tuple[str, str]], scores: Optional[Sequence[object]] = None) -> None:
        self.entries: tuple[tuple[str, str], ...] = tuple(entries)
        self.rank: dict[tuple[str, str], int] = {}
        for i, entry in enumerate(self.entries):
            if entry in self.rank:
                raise ValidationError(f"duplicate plan entry {entry}")
            self.rank[entry] = i
        self.scores: Optional[tuple[object, ...]] = tuple(scores) if scores is not None else None
        if self.scores is not None and len(self.scores) != len(self.entries):
            raise ValidationError("scores must parallel plan entries")

    def __contains__(self, entry: tuple[str, str]) -> bool:
        return entry in self.rank

    def __iter__(self) -> Iterator[tuple[str, str]]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ActivationPlan) and self.entries == other.entries

    def __repr__(self) -> str:
        return f"ActivationPlan({len(self.entries)} entries)"

    def to_records(self) -> list[dict]:
        """Export as the plan-JSON records consumed by the CLI."""
        records = []
        for i, (app_id, ms_id) in enumerate(self.entries):
            rec = {"app": app_id, "microservice": ms_id, "rank": i}
            rec["score_key"] = list(self.scores[i]) if self.scores is not None else None
            records.append(rec)
        return records


def apps_by_id(apps: Sequence[Application]) -> dict[str, Application]:
    return {app.id: app for app in apps}


def active_microservices(apps: Sequence[Application], state: ClusterState) -> set[tuple[str, str]]:
    """Microservices with every replica placed (activation is all-or-nothing)."""
    placed: dict[tuple[str, str], int] = {}
    for app_id, ms_id, _ in state.assignment:
        placed[(app_id, ms_id)] = placed.get((app_id, ms_id), 0) + 1
    active = set()
    for app in apps:
        for ms in app.microservices.values():
            if placed.get((app.id, ms.id), 0) == ms.replicas:
                active.add((app.id, ms.id))
    return active


def validate_cluster_state(state: ClusterState, apps: Sequence[Application]) -> None:
    """Check all ClusterState invariants; raise ValidationError on the first breach.

    Used by tests and by the simulator after every scheduling pass.
    """
    lookup = apps_by_id(apps)
    loads: dict[str, float] = {}
    for key, sid in state.assignment.items():
        app_id, ms_id, ridx = key
        srv = state.servers.get(sid)
        if srv is None:
            raise ValidationError(f"replica {key} assigned to unknown server {sid!r}")
        if not srv.healthy:
            raise ValidationError(f"replica {key} assigned to unhealthy server {sid!r}")
        app = lookup.get(app_id)
        if app is None or ms_id not in app.microservices:
            raise ValidationError(f"assignment references unknown microservice {app_id!r}/{ms_id!r}")
        ms = app.microservices[ms_id]
        if not (0 <= ridx < ms.replicas):
            raise ValidationError(f"replica index out of range for {key}")
        loads[sid] = loads.get(sid, 0.0) + ms.replica_demand
    for sid, load in loads.items():
        cap = state.servers[sid].capacity
        if load > cap + CAP_EPS * max(1.0, cap):
            raise ValidationError(f"server {sid!r} overloaded: load {load} > capacity {cap}")


# ---------------------------------------------------------------------------
# Serialization: workload-json and cluster-json documents.

def _require(obj: Mapping, key: str, context: str):
    if key not in obj:
        raise ParseError(f"{context}: missing required field {key!r}")
    return obj[key]


def _parse_app(doc: Mapping) -> Application:
    app_id = str(_require(doc, "id", "application"))
    context = f"application {app_id!r}"
    ms_docs = _require(doc, "microservices", context)
    if not isinstance(ms_docs, list):
        raise ParseError(f"{context}: 'microservices' must be a list")
    microservices: dict[str, Microservice] = {}
    for ms_doc in ms_docs:
        ms_id = str(_require(ms_doc, "id", context))
        if ms_id in microservices:
            raise ValidationError(f"{context}: duplicate microservice id {ms_id!r}")
        tag = ms_doc.get("tag")
        microservices[ms_id] = Microservice(
            id=ms_id,
            demand=float(_require(ms_doc, "demand", f"{context}/{ms_id}")),
            tag=DEFAULT_TAG if tag is None else int(tag),
            replicas=int(ms_doc.get("replicas", 1)),
        )
    edges = doc.get("edges")
    graph = None
    if edges is not None:
        graph = DependencyGraph(
            microservices, [(str(a), str(b)) for a, b in edges], owner=app_id
        )
    cg_docs = doc.get("call_graphs")
    call_graphs = None
    if cg_docs is not None:
        call_graphs = tuple(
            CallGraph(tuple(str(n) for n in _require(cg, "nodes", context)), int(_require(cg, "weight", context)))
            for cg in cg_docs
        )
    return Application(
        id=app_id,
        microservices=microservices,
        graph=graph,
        price_per_unit=float(doc.get("price_per_unit", 1.0)),
        call_graphs=call_graphs,
    )


def load_workload(source: bytes | str) -> list[Application]:
    """Parse a workload-json document into validated applications."""
    if isinstance(source, bytes):
        try:
            source = source.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"workload is not valid UTF-8: {exc}") from None
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise ParseError(f"workload is not valid JSON: {exc}") from None
    if not isinstance(doc, Mapping) or "applications" not in doc:
        raise ParseError("workload document must be an object with an 'applications' list")
    apps = [_parse_app(app_doc) for app_doc in doc["applications"]]
    seen: set[str] = set()
    for app in apps:
        if app.id in seen:
            raise ValidationError(f"duplicate application id {app.id!r}")
        seen.add(app.id)
    return sorted(apps, key=lambda a: a.id)


def save_workload(apps: Sequence[Application]) -> bytes:
    """Serialize applications to canonical workload-json bytes.

    Output is byte-deterministic: apps, microservices, and edges are sorted,
    and keys are emitted in a fixed order, so load/save round-trips are the
    identity on valid workloads.
    """
    doc = {"applications": []}
    for app in sorted(apps, key=lambda a: a.id):
        app_doc: dict = {
            "id": app.id,
            "price_per_unit": app.price_per_unit,
            "microservices": [
                {"id": ms.id, "demand": ms.demand, "tag": ms.tag, "replicas": ms.replicas}
                for ms in app.microservices.values()
            ],
            "edges": [list(e) for e in app.graph.edges] if app.graph is not None else None,
            "call_graphs": (
                [{"nodes": list(cg.microservice_ids), "weight": cg.weight} for cg in app.call_graphs]
                if app.call_graphs is not None
                else None
            ),
        }
        doc["applications"].append(app_doc)
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8")


def load_cluster(source: bytes | str) -> ClusterState:
    """Parse a cluster-json document into an empty-assignment ClusterState."""
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise ParseError(f"cluster is not valid JSON: {exc}") from None
    if not isinstance(doc, Mapping) or "servers" not in doc:
        raise ParseError("cluster document must be an object with a 'servers' list")
    servers: dict[str, ServerNode] = {}
    for srv in doc["servers"]:
        sid = str(_require(srv, "id", "server"))
        if sid in servers:
            raise ValidationError(f"duplicate server id {sid!r}")
        servers[sid] = ServerNode(id=sid, capacity=float(_require(srv, "capacity", f"server {sid!r}")))
    return ClusterState(servers)


def save_cluster(state: ClusterState) -> bytes:
    doc = {
        "servers": [
            {"id": srv.id, "capacity": srv.capacity}
            for srv in sorted(state.servers.values(), key=lambda s: s.id)
        ]
    }
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8")
