"""Packing of a planned activation list onto healthy servers.

Placement is per replica and three-pronged, in order: best-fit, migration
based repacking, then deletion of lower-ranked microservices.  Replica
groups are all-or-nothing; the first microservice that cannot be placed
stops the walk and everything after it is dropped.  The result carries the
final cluster state plus the action diff (deletes, migrations, restarts)
an agent would execute, ordered so capacity is freed before it is
consumed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional, Sequence

from sortedcontainers import SortedList

from .model import (
    ActivationPlan,
    Application,
    ClusterState,
    ReplicaKey,
    ValidationError,
    apps_by_id,
    validate_cluster_state,
)

__all__ = [
    "Action",
    "PackingOutcome",
    "get_best_fit",
    "repack_to_fit",
    "delete_to_fit",
    "schedule",
]

_EPS = 1e-9

# Sort key for delete candidates: plan rank when ranked, else past the end
# (out-of-plan microservices are deleted first), canonical id tie-break.
_UNRANKED = 1 << 60


@dataclass
class Action:
    """One agent task.  Migrate carries both endpoints, Delete only the
    source, Restart only the target."""

    kind: Literal["delete", "migrate", "restart"]
    app: str
    microservice: str
    replica: int
    from_server: Optional[str] = None
    to_server: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind == "delete" and not (self.from_server and self.to_server is None):
            raise ValidationError("delete action must have only from_server")
        if self.kind == "restart" and not (self.to_server and self.from_server is None):
            raise ValidationError("restart action must have only to_server")
        if self.kind == "migrate" and not (self.from_server and self.to_server):
            raise ValidationError("migrate action must have both endpoints")

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "app": self.app,
            "microservice": self.microservice,
            "replica": self.replica,
            "from_server": self.from_server,
            "to_server": self.to_server,
        }


@dataclass(frozen=True)
class PackingOutcome:
    state: ClusterState
    scheduled: frozenset[tuple[str, str]]
    dropped: frozenset[tuple[str, str]]
    actions: tuple[Action, ...]
    stop_index: int  # plan index where the walk stopped, len(plan) if it finished

    @property
    def action_counts(self) -> dict[str, int]:
        counts = {"delete": 0, "migrate": 0, "restart": 0}
        for a in self.actions:
            counts[a.kind] += 1
        return counts


class _Packer:
    """Incremental placement state over the healthy part of a cluster.

    Keeps a sorted (remaining, server) index so best-fit queries and
    updates stay logarithmic at 100k servers.  Actions are collapsed into
    a coherent diff: migrating a replica placed earlier in this run
    rewrites its pending restart/migration instead of stacking actions,
    and deleting it retracts them.
    """

    def __init__(self, prior: ClusterState, apps: dict[str, Application], rank_key) -> None:
        self.apps = apps
        self.rank_key = rank_key
        self.remaining: dict[str, float] = {}
        self.load: dict[str, float] = {}
        self.contents: dict[str, dict[ReplicaKey, float]] = {}
        for sid, srv in prior.servers.items():
            if srv.healthy:
                self.remaining[sid] = srv.capacity
                self.load[sid] = 0.0
                self.contents[sid] = {}
        self.tree = SortedList((rem, sid) for sid, rem in self.remaining.items())
        self.total_free = sum(self.remaining.values())
        self.placed: dict[ReplicaKey, str] = {}
        self.group_count: dict[tuple[str, str], int] = {}
        self.victims = SortedList()  # rank keys of microservices with >= 1 replica placed
        for key, sid in prior.assignment.items():
            demand = apps[key[0]].microservices[key[1]].replica_demand
            self._attach(key, demand, sid)
        # Pending actions per replica, so later events can rewrite them.
        self.deletes: list[Action] = []
        self.migrations: list[Action] = []
        self.restarts: list[Action] = []
        self.pending_restart: dict[ReplicaKey, Action] = {}
        self.pending_migration: dict[ReplicaKey, Action] = {}

    # -- low-level structure maintenance ------------------------------------

    def _set_remaining(self, sid: str, value: float) -> None:
        old = self.remaining[sid]
        self.tree.remove((old, sid))
        self.tree.add((value, sid))
        self.remaining[sid] = value
        self.total_free += value - old

    def _attach(self, key: ReplicaKey, demand: float, sid: str) -> None:
        if self.remaining[sid] - demand < -_EPS * max(1.0, self.load[sid] + demand):
            raise ValidationError(f"placement of {key} would overload server {sid!r}")
        self._set_remaining(sid, self.remaining[sid] - demand)
        self.load[sid] += demand
        self.contents[sid][key] = demand
        self.placed[key] = sid
        group = (key[0], key[1])
        n = self.group_count.get(group, 0)
        if n == 0:
            self.victims.add(self.rank_key(group))
        self.group_count[group] = n + 1

    def _detach(self, key: ReplicaKey) -> str:
        sid = self.placed.pop(key)
        demand = self.contents[sid].pop(key)
        self._set_remaining(sid, self.remaining[sid] + demand)
        self.load[sid] -= demand
        group = (key[0], key[1])
        self.group_count[group] -= 1
        if self.group_count[group] == 0:
            del self.group_count[group]
            self.victims.remove(self.rank_key(group))
        return sid

    # -- action-aware operations ---------------------------------------------

    def place_restart(self, key: ReplicaKey, demand: float, sid: str) -> None:
        self._attach(key, demand, sid)
        action = Action("restart", key[0], key[1], key[2], to_server=sid)
        self.restarts.append(action)
        self.pending_restart[key] = action

    def migrate(self, key: ReplicaKey, dst: str) -> None:
        src = self._detach(key)
        demand = self.apps[key[0]].microservices[key[1]].replica_demand
        self._attach(key, demand, dst)
        restart = self.pending_restart.get(key)
        if restart is not None:
            restart.to_server = dst  # not yet started anywhere: just retarget
            return
        pending = self.pending_migration.get(key)
        if pending is not None:
            if pending.from_server == dst:
                self.migrations.remove(pending)
                del self.pending_migration[key]
            else:
                pending.to_server = dst
            return
        action = Action("migrate", key[0], key[1], key[2], from_server=src, to_server=dst)
        self.migrations.append(action)
        self.pending_migration[key] = action

    def delete(self, key: ReplicaKey) -> str:
        sid = self._detach(key)
        restart = self.pending_restart.pop(key, None)
        if restart is not None:
            self.restarts.remove(restart)  # never ran in the prior state
            return sid
        pending = self.pending_migration.pop(key, None)
        if pending is not None:
            self.migrations.remove(pending)
            sid = pending.from_server
        self.deletes.append(Action("delete", key[0], key[1], key[2], from_server=sid))
        return sid

    # -- the three placement strategies ---------------------------------------

    def best_fit(self, demand: float, exclude: Optional[str] = None) -> Optional[str]:
        idx = self.tree.bisect_left((demand - _EPS, ""))
        while idx < len(self.tree):
            sid = self.tree[idx][1]
            if sid != exclude:
                return sid
            idx += 1
        return None

    def repack_to_fit(self, demand: float) -> Optional[str]:
        # Migration cannot create capacity, so overall free space bounds it.
        if self.total_free < demand - _EPS:
            return None
        candidates = sorted(
            (sid for sid, pods in self.contents.items() if pods),
            key=lambda sid: (-self.remaining[sid], sid),
        )
        for sid in candidates:
            if self.remaining[sid] + self.load[sid] < demand - _EPS:
                continue
            if self._evacuate(sid, demand):
                return sid
        return None

    def _evacuate(self, sid: str, demand: float) -> bool:
        """Free enough of ``sid`` for ``demand`` by migrating replicas away.

        Greedy smallest-first; if that cannot free enough, retry each single
        replica from largest down.  Moves are undone if the attempt fails.
        """
        moved: list[tuple[ReplicaKey, str]] = []
        by_size = sorted(self.contents[sid].items(), key=lambda kv: (kv[1], kv[0]))
        for key, rep_demand in by_size:
            if self.remaining[sid] >= demand - _EPS:
                break
            target = self.best_fit(rep_demand, exclude=sid)
            if target is None:
                continue
            self.migrate(key, target)
            moved.append((key, sid))
        if self.remaining[sid] >= demand - _EPS:
            return True
        for key, origin in reversed(moved):
            self.migrate(key, origin)
        for key, rep_demand in sorted(self.contents[sid].items(), key=lambda kv: (-kv[1], kv[0])):
            if self.remaining[sid] + rep_demand < demand - _EPS:
                break
            target = self.best_fit(rep_demand, exclude=sid)
            if target is not None:
                self.migrate(key, target)
                return True
        return False

    def delete_to_fit(self, demand: float, incoming_rank: int, *, retry_global: bool = False) -> Optional[str]:
        """Delete strictly lower-ranked microservices, lowest rank first.

        After each deletion only the servers that gained capacity are
        checked (the literal semantics), unless ``retry_global``; deletions
        are not rolled back when the search fails.
        """
        while self.victims:
            group_key = self.victims[-1]
            if group_key[0] <= incoming_rank:
                return None
            app_id, ms_id = group_key[1], group_key[2]
            gained: set[str] = set()
            replicas = self.apps[app_id].microservices[ms_id].replicas
            for r in range(replicas):
                key = (app_id, ms_id, r)
                if key in self.placed:
                    gained.add(self.delete(key))
            if retry_global:
                found = self.best_fit(demand)
            else:
                fits = [(self.remaining[s], s) for s in gained if self.remaining[s] >= demand - _EPS]
                found = min(fits)[1] if fits else None
            if found is not None:
                return found
        return None

    def drop_group(self, app_id: str, ms_id: str) -> None:
        """All-or-nothing cleanup when one replica of a group is unplaceable."""
        for r in range(self.apps[app_id].microservices[ms_id].replicas):
            key = (app_id, ms_id, r)
            if key in self.placed:
                self.delete(key)

    def actions(self) -> tuple[Action, ...]:
        return tuple(self.deletes + self.migrations + self.restarts)


def _make_rank_key(plan: ActivationPlan):
    def rank_key(group: tuple[str, str]) -> tuple:
        return (plan.rank.get(group, _UNRANKED), group[0], group[1])

    return rank_key


def _packer_for(state: ClusterState, apps: Sequence[Application], plan: Optional[ActivationPlan] = None) -> _Packer:
    return _Packer(state, apps_by_id(apps), _make_rank_key(plan if plan is not None else ActivationPlan([])))


def get_best_fit(ms_demand: float, state: ClusterState, apps: Sequence[Application]) -> Optional[str]:
    """Healthy server with the minimum remaining capacity that still fits
    ``ms_demand`` (ties by server id), or None."""
    if ms_demand < 0:
        raise ValueError("demand must be >= 0")
    return _packer_for(state, apps).best_fit(ms_demand)


def repack_to_fit(ms_demand: float, state: ClusterState, apps: Sequence[Application]) -> tuple[Optional[str], list[Action]]:
    """Try to free room for ``ms_demand`` by migrating replicas between
    servers.  On success the migrations are applied to ``state`` and
    returned; on failure the state is untouched."""
    packer = _packer_for(state, apps)
    sid = packer.repack_to_fit(ms_demand)
    if sid is None:
        return None, []
    actions = list(packer.actions())
    for action in actions:
        key = (action.app, action.microservice, action.replica)
        state.unassign(key)
        state.assign(key, action.to_server)
    return sid, actions


def delete_to_fit(
    ms_demand: float,
    state: ClusterState,
    apps: Sequence[Application],
    plan: ActivationPlan,
    incoming_rank: int,
    *,
    retry_global: bool = False,
) -> tuple[Optional[str], list[Action]]:
    """Delete microservices ranked strictly below ``incoming_rank`` until a
    freed server fits ``ms_demand``.  Deletions stick even on failure."""
    packer = _packer_for(state, apps, plan)
    sid = packer.delete_to_fit(ms_demand, incoming_rank, retry_global=retry_global)
    actions = list(packer.actions())
    for action in actions:
        state.unassign((action.app, action.microservice, action.replica))
    return sid, actions


def schedule(
    plan: ActivationPlan,
    prior: ClusterState,
    apps: Sequence[Application],
    *,
    delete_retry_global: bool = False,
    audit: bool = False,
) -> PackingOutcome:
    """Map the plan onto healthy servers, starting from the prior assignment.

    Walks the plan in rank order keeping already-running replicas in place;
    missing replicas go through best-fit, then repacking, then deletion of
    lower-ranked microservices.  If a replica still cannot be placed its
    whole group is removed and the walk stops, dropping the remainder of
    the plan.  Microservices outside the (surviving) plan are deleted.

    ``audit`` re-validates the full cluster state after every placement
    step; meant for small test instances only.
    """
    lookup = apps_by_id(apps)
    packer = _Packer(prior, lookup, _make_rank_key(plan))

    def audit_state() -> None:
        if audit:
            validate_cluster_state(_state_from(packer, prior), apps)

    stop_index = len(plan)
    for index, (app_id, ms_id) in enumerate(plan.entries):
        ms = lookup[app_id].microservices[ms_id]
        demand = ms.replica_demand
        group_failed = False
        for r in range(ms.replicas):
            key = (app_id, ms_id, r)
            if key in packer.placed:
                continue
            sid = packer.best_fit(demand)
            if sid is None:
                sid = packer.repack_to_fit(demand)
            if sid is None:
                sid = packer.delete_to_fit(demand, index, retry_global=delete_retry_global)
            if sid is None:
                group_failed = True
                break
            packer.place_restart(key, demand, sid)
            audit_state()
        if group_failed:
            packer.drop_group(app_id, ms_id)
            audit_state()
            stop_index = index
            break

    scheduled = frozenset(plan.entries[:stop_index])
    leftovers = sorted((g for g in packer.group_count if g not in scheduled), key=packer.rank_key, reverse=True)
    for group in leftovers:
        packer.drop_group(*group)
        audit_state()

    state = _state_from(packer, prior)
    validate_cluster_state(state, apps)
    return PackingOutcome(
        state=state,
        scheduled=scheduled,
        dropped=frozenset(plan.entries[stop_index:]),
        actions=packer.actions(),
        stop_index=stop_index,
    )


def _state_from(packer: _Packer, prior: ClusterState) -> ClusterState:
    state = ClusterState.__new__(ClusterState)
    state.servers = dict(prior.servers)
    state.assignment = dict(packer.placed)
    return state
