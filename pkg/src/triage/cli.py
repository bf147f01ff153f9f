"""Command-line interface.

Subcommands: gen, plan, run, sweep, replay, bench, oracle, explain.
Stdout carries a human-readable summary; files carry machine output.
Exit codes: 0 success, 1 validation error, 2 exact-budget exceeded.
All randomness is governed by explicit seeds.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import oracle as oracle_mod
from . import sim, workload
from .model import (
    ClusterState,
    ParseError,
    ValidationError,
    load_cluster,
    load_workload,
)
from .planner import plan
from .scheduler import schedule

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_BUDGET = 2


def _read(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None


def _load_inputs(workload_path: str, cluster_path: str):
    return load_workload(_read(workload_path)), load_cluster(_read(cluster_path))


def _write(path: str, data: bytes | str) -> None:
    if isinstance(data, str):
        data = data.encode("utf-8")
    Path(path).write_bytes(data)


def _add_scheme_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scheme", default="triage", choices=sim.SCHEMES, help="resilience scheme to run")
    p.add_argument("--objective", default="fair", choices=["cost", "fair"],
                   help="operator objective (triage scheme only)")
    p.add_argument("--seed", type=int, default=0)


def cmd_gen(args) -> int:
    doc = json.loads(_read(args.spec))
    spec = workload.genspec_from_json(doc)
    apps = workload.generate_workload(spec)
    from .model import save_workload, save_cluster

    _write(args.out, save_workload(apps))
    total_ms = sum(len(a.microservices) for a in apps)
    print(f"generated {len(apps)} applications, {total_ms} microservices -> {args.out}")
    if args.cluster_out:
        cap = workload.capacity_for_utilization(apps, args.servers, args.utilization)
        cluster = workload.make_cluster(args.servers, cap)
        _write(args.cluster_out, save_cluster(cluster))
        print(f"cluster: {args.servers} servers x {cap:.3f} units -> {args.cluster_out}")
    return EXIT_OK


def cmd_plan(args) -> int:
    apps, cluster = _load_inputs(args.workload, args.cluster)
    result = plan(apps, cluster.healthy_capacity(), args.objective, skip_unplaceable=args.skip_unplaceable)
    _write(args.out, json.dumps(result.plan.to_records(), indent=2) + "\n")
    planned = sum(apps_demand(apps, entry) for entry in result.plan)
    print(f"planned {len(result.plan)} microservices ({planned:.2f} demand units) "
          f"under objective={args.objective} in {result.duration_s * 1000:.2f} ms -> {args.out}")
    return EXIT_OK


def apps_demand(apps, entry) -> float:
    app_id, ms_id = entry
    for app in apps:
        if app.id == app_id:
            return app.microservices[ms_id].demand
    raise KeyError(entry)


def cmd_run(args) -> int:
    apps, cluster = _load_inputs(args.workload, args.cluster)
    result = sim.run_episode(apps, cluster, args.fail, args.scheme, args.objective, args.seed)
    doc = {k: v for k, v in result.__dict__.items()}
    _write(args.out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"scheme={result.scheme}{(':' + result.objective) if result.objective else ''} "
          f"fail={result.failure_frac:g} avail={result.availability:.3f} revenue={result.revenue:.3f} "
          f"util={result.utilization:.3f} dropped={result.dropped} -> {args.out}")
    return EXIT_OK


def cmd_explain(args) -> int:
    apps, cluster = _load_inputs(args.workload, args.cluster)
    prior = sim.initial_placement(apps, cluster)
    failed_state, _ = sim.inject_failure(prior, args.fail, args.seed)
    capacity = failed_state.healthy_capacity()
    outcome, _, _ = sim._run_scheme(args.scheme, args.objective if args.scheme == "triage" else "",
                                    apps, failed_state, capacity)
    lines = [json.dumps(a.to_record(), sort_keys=True) for a in outcome.actions]
    _write(args.out, "\n".join(lines) + ("\n" if lines else ""))
    counts = outcome.action_counts
    print(f"actions: {counts['delete']} deletes, {counts['migrate']} migrations, "
          f"{counts['restart']} restarts -> {args.out}")
    return EXIT_OK


def _cluster_from_config(doc, apps) -> ClusterState:
    if isinstance(doc, str):
        return load_cluster(_read(doc))
    servers = int(doc["servers"])
    if "capacity" in doc:
        cap = float(doc["capacity"])
    else:
        cap = workload.capacity_for_utilization(apps, servers, float(doc.get("utilization", 0.7)))
    return workload.make_cluster(servers, cap)


def cmd_sweep(args) -> int:
    config = json.loads(_read(args.config))
    if config.get("workload"):
        apps = load_workload(_read(config["workload"]))
    elif config.get("genspec"):
        apps = workload.generate_workload(workload.genspec_from_json(config["genspec"]))
    else:
        raise ValidationError("sweep config needs 'workload' or 'genspec'")
    cluster = _cluster_from_config(config["cluster"], apps)
    results = sim.sweep(
        apps,
        cluster,
        config.get("failure_fracs", [0.1, 0.3, 0.5, 0.7, 0.9]),
        config.get("schemes", ["triage:fair", "triage:cost", "fair", "priority", "default"]),
        config.get("seeds", [0]),
        jobs=args.jobs if args.jobs is not None else int(config.get("jobs", 1)),
    )
    include_timing = not args.no_timing and bool(config.get("timing", True))
    out_path = args.out or config.get("out", "results.csv")
    _write(out_path, sim.results_csv(results, include_timing=include_timing))
    print(f"{len(results)} episodes -> {out_path}")
    return EXIT_OK


def cmd_replay(args) -> int:
    apps, cluster = _load_inputs(args.workload, args.cluster)
    trace = _read_trace(args.trace)
    result = sim.replay_trace(
        apps, cluster, trace, args.scheme, args.objective, args.seed,
        detect_s=args.detect, act_s=args.act,
    )
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["t_seconds", "capacity_fraction", "requests_served", "availability", "revenue", "utilization"])
    for p in result.points:
        writer.writerow([f"{p.t:g}", f"{p.capacity_fraction:g}", f"{p.requests_served:g}",
                         f"{p.availability:.6f}", f"{p.revenue:.6f}", f"{p.utilization:.6f}"])
    _write(args.out, out.getvalue())
    print(f"replayed {len(result.points)} trace points, cumulative served weight "
          f"{result.cumulative_served:.0f} -> {args.out}")
    return EXIT_OK


def _read_trace(path: str) -> list[tuple[float, float]]:
    trace = []
    for row in csv.reader(io.StringIO(_read(path).decode("utf-8"))):
        if not row or row[0].strip().lower() in ("t", "t_seconds"):
            continue
        trace.append((float(row[0]), float(row[1])))
    if not trace:
        raise ValidationError(f"trace {path} contains no points")
    return trace


def cmd_bench(args) -> int:
    sizes = [int(tok) for tok in args.nodes.split(",") if tok]
    if not sizes or any(n < 1 for n in sizes):
        raise ValidationError(f"--nodes must list positive integers, got {args.nodes!r}")
    if args.genspec:
        spec = workload.genspec_from_json(json.loads(_read(args.genspec)))
    else:
        spec = workload.alibaba_like_spec(seed=args.seed)
    apps = workload.generate_workload(spec)
    total_ms = sum(len(a.microservices) for a in apps)
    rows = []
    for n in sizes:
        cap = workload.capacity_for_utilization(apps, n, args.utilization)
        cluster = workload.make_cluster(n, cap)
        prior = sim.initial_placement(apps, cluster)
        failed, _ = sim.inject_failure(prior, args.fail, args.seed)
        capacity = failed.healthy_capacity()
        result = plan(apps, capacity, args.objective)
        start = time.perf_counter()
        outcome = schedule(result.plan, failed, apps)
        sched_s = time.perf_counter() - start
        oracle_ms = ""
        if total_ms <= oracle_mod.DEFAULT_MAX_MICROSERVICES and n <= oracle_mod.DEFAULT_MAX_SERVERS:
            solution = oracle_mod.solve_exact(apps, failed, args.objective)
            oracle_ms = f"{solution.solve_time_s * 1000:.3f}"
        rows.append({
            "nodes": n,
            "microservices": total_ms,
            "planned": len(result.plan),
            "scheduled": len(outcome.scheduled),
            "plan_ms": result.duration_s * 1000,
            "sched_ms": sched_s * 1000,
            "total_ms": (result.duration_s + sched_s) * 1000,
            "oracle_ms": oracle_ms,
        })
        print(f"nodes={n}: plan {rows[-1]['plan_ms']:.1f} ms, schedule {rows[-1]['sched_ms']:.1f} ms, "
              f"total {rows[-1]['total_ms']:.1f} ms")
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({**row, "plan_ms": f"{row['plan_ms']:.3f}", "sched_ms": f"{row['sched_ms']:.3f}",
                         "total_ms": f"{row['total_ms']:.3f}"})
    _write(args.out, out.getvalue())
    print(f"-> {args.out}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    apps, cluster = _load_inputs(args.workload, args.cluster)
    solution = oracle_mod.solve_exact(apps, cluster, args.objective)
    doc = {
        "objective": args.objective,
        "objective_value": solution.objective_value,
        "activation": sorted([a, m] for a, m in solution.activation),
        "placement": {f"{a}/{m}/{r}": sid for (a, m, r), sid in sorted(solution.placement.items())},
        "allocations": solution.allocations,
        "nodes_explored": solution.nodes_explored,
        "solve_time_s": solution.solve_time_s,
    }
    _write(args.out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"optimal {args.objective} objective {solution.objective_value:.4f} "
          f"({len(solution.activation)} microservices active, {solution.nodes_explored} nodes explored) -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="triage",
                                     description="Criticality-aware graceful degradation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic workload from a GenSpec JSON file")
    p.add_argument("spec", help="GenSpec JSON path")
    p.add_argument("--out", default="workload.json")
    p.add_argument("--cluster-out", default=None, help="also emit a cluster sized for the workload")
    p.add_argument("--servers", type=int, default=100)
    p.add_argument("--utilization", type=float, default=0.7)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("plan", help="produce an activation plan for a workload and cluster")
    p.add_argument("workload")
    p.add_argument("cluster")
    p.add_argument("--objective", default="fair", choices=["cost", "fair"])
    p.add_argument("--skip-unplaceable", action="store_true",
                   help="skip oversized candidates instead of stopping at the first one")
    p.add_argument("--out", default="plan.json")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="run one failure episode and report metrics")
    p.add_argument("workload")
    p.add_argument("cluster")
    p.add_argument("--fail", type=float, default=0.5, help="fraction of capacity to fail")
    _add_scheme_flags(p)
    p.add_argument("--out", default="episode.json")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("explain", help="emit the action log (JSON lines) for one episode")
    p.add_argument("workload")
    p.add_argument("cluster")
    p.add_argument("--fail", type=float, default=0.5)
    _add_scheme_flags(p)
    p.add_argument("--out", default="actions.jsonl")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("sweep", help="run a failure-level x scheme x seed sweep from a config file")
    p.add_argument("config", help="sweep config JSON path")
    p.add_argument("--out", default=None, help="override the config's output path")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--no-timing", action="store_true",
                   help="zero the wall-clock columns so output bytes are reproducible")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay", help="replay a capacity trace CSV (t_seconds,capacity_fraction)")
    p.add_argument("workload")
    p.add_argument("cluster")
    p.add_argument("trace")
    _add_scheme_flags(p)
    p.add_argument("--detect", type=float, default=sim.DEFAULT_DETECT_S, help="failure detection delay (s)")
    p.add_argument("--act", type=float, default=sim.DEFAULT_ACT_S, help="action execution delay (s)")
    p.add_argument("--out", default="replay.csv")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("bench", help="time planner+scheduler across cluster sizes")
    p.add_argument("--nodes", default="1000,10000,100000", help="comma-separated server counts")
    p.add_argument("--fail", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--objective", default="fair", choices=["cost", "fair"])
    p.add_argument("--utilization", type=float, default=0.7)
    p.add_argument("--genspec", default=None, help="workload GenSpec JSON (default: stock 18-app benchmark)")
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("oracle", help="solve a desk-scale instance exactly")
    p.add_argument("workload")
    p.add_argument("cluster")
    p.add_argument("--objective", default="cost", choices=["cost", "fair"])
    p.add_argument("--out", default="oracle.json")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except oracle_mod.BudgetExceededError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (ParseError, ValidationError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
