"""Command-line frontend.

Subcommands: lower, dag, plan, simulate, search, validate, explain.

Exit codes: 0 success, 2 missing input, 3 parse error, 4 validation error,
5 no feasible candidate, 6 internal deadlock.  Artifacts never embed wall
clock time, so identical inputs produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .depgraph import build_dep_graph, to_dot
from .graph_ir import GraphError, TileConfig, load_graph, lower_graph
from .hwmodel import ConfigError, HardwareSpec, compute_page_budget, load_hw_spec
from .planner import (
    PlanFlags,
    SearchSpace,
    build_candidate,
    derive_page_budget,
    enumerate_candidates,
    resource_filter,
    validate_plan,
)
from .search import (
    NoFeasibleCandidate,
    TraceFormatError,
    parse_trace,
    rebuild_candidate,
    run_search,
    serialize_trace,
)
from .simulator import DeadlockError, chrome_trace_events, simulate

EXIT_OK = 0
EXIT_MISSING_INPUT = 2
EXIT_PARSE_ERROR = 3
EXIT_VALIDATION_ERROR = 4
EXIT_NO_FEASIBLE = 5
EXIT_DEADLOCK = 6


class MissingInput(Exception):
    pass


def _read(path: str | None, what: str) -> str:
    if not path:
        raise MissingInput(f"missing required --{what}")
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"{what} file not found: {path}")
    return p.read_text()


def _first_tile(space_text: str | None) -> TileConfig:
    if not space_text:
        return TileConfig()
    space = SearchSpace.from_json(space_text)
    return TileConfig(
        block_m=min(space.block_m),
        block_n=min(space.block_n),
        block_k=min(space.block_k),
        k_split=min(space.k_split),
    )


def _emit(args, payload: str) -> None:
    if args.out:
        Path(args.out).write_text(payload)
    else:
        sys.stdout.write(payload)


def cmd_lower(args) -> int:
    graph = load_graph(_read(args.graph, "graph"))
    spec = load_hw_spec(_read(args.hw, "hw"))
    tile = _first_tile(Path(args.space).read_text() if args.space else None)
    trace = lower_graph(graph, tile, page_bytes=spec.page_size)
    dep = build_dep_graph(trace)
    from .planner import classify_fills

    streamed, _ = classify_fills(trace)
    per_stage = max((len(trace.ops[i].writes) for i in streamed), default=1)
    peak_shared = max(
        (sum(w.length for w in op.writes if w.space.value == "SharedPage")
         for op in trace.ops),
        default=0,
    )
    budget = derive_page_budget(graph, trace, spec, n_stage=2, per_stage=per_stage,
                                peak_resident_act=0)
    counts = trace.counts_by_kind()
    summary = {
        "operators": len(graph.operators),
        "micro_ops": len(trace),
        "counts_by_kind": dict(sorted(counts.items())),
        "raw_edges": len(dep.raw_edges),
        "war_constraints": len(dep.war_constraints),
        "peak_group_shared_bytes": peak_shared,
        "pages": {
            "page_size": spec.page_size,
            "budget_at_stage": {s: compute_page_budget(spec, s) for s in range(0, 5)},
            "per_stage": per_stage,
            "max_stages": budget.n_stage,
        },
        "tile": list(tile.key()),
        "padding": {k: list(v) for k, v in sorted(trace.padding.items())},
    }
    if args.format == "json":
        _emit(args, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    else:
        lines = [
            f"operators        : {summary['operators']}",
            f"micro-ops        : {summary['micro_ops']}",
        ]
        for kind, cnt in sorted(counts.items()):
            lines.append(f"  {kind:<16}: {cnt}")
        lines += [
            f"raw edges        : {summary['raw_edges']}",
            f"war constraints  : {summary['war_constraints']}",
            f"peak group smem  : {peak_shared} bytes",
            f"pages/stage      : {per_stage} (max stages {budget.n_stage})",
        ]
        _emit(args, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_dag(args) -> int:
    graph = load_graph(_read(args.graph, "graph"))
    spec = load_hw_spec(_read(args.hw, "hw"))
    tile = _first_tile(Path(args.space).read_text() if args.space else None)
    trace = lower_graph(graph, tile, page_bytes=spec.page_size)
    dep = build_dep_graph(trace)
    _emit(args, to_dot(dep, trace))
    return EXIT_OK


def _candidate_from_plan_file(plan_text: str, graph, spec):
    from .depgraph import build_dep_graph as _build

    try:
        plan = json.loads(plan_text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"plan file is not valid JSON: {exc}") from exc
    bm, bn, bk, ks = plan["tile"]
    tile = TileConfig(block_m=bm, block_n=bn, block_k=bk, k_split=ks)
    flags = PlanFlags(**plan.get("flags", {}))
    trace = lower_graph(graph, tile, page_bytes=spec.page_size)
    dep = _build(trace)
    if flags.split_reduction:
        from .depgraph import split_reduction

        dep, trace = split_reduction(dep, trace)
    return build_candidate(
        graph, trace, dep, spec,
        tile=tile,
        n_stage=int(plan["n_stage"]),
        consumer_warps=int(plan.get("consumer_warps", 16)),
        prefetch_stride=int(plan.get("prefetch_stride", 1)),
        swizzle=int(plan.get("swizzle", 0)),
        flags=flags,
    )


def cmd_plan(args) -> int:
    graph = load_graph(_read(args.graph, "graph"))
    spec = load_hw_spec(_read(args.hw, "hw"))
    space = SearchSpace.from_json(_read(args.space, "space"))
    for candidate in enumerate_candidates(graph, spec, space):
        ok, _ = resource_filter(candidate, spec)
        if ok:
            payload = {
                "tile": list(candidate.tile.key()),
                "n_stage": candidate.n_stage,
                "consumer_warps": candidate.consumer_warps,
                "prefetch_stride": candidate.prefetch_stride,
                "swizzle": candidate.swizzle,
                "flags": candidate.flags.as_dict(),
            }
            _emit(args, json.dumps(payload, indent=2, sort_keys=True) + "\n")
            return EXIT_OK
    raise NoFeasibleCandidate({})


def cmd_simulate(args) -> int:
    graph = load_graph(_read(args.graph, "graph"))
    spec = load_hw_spec(_read(args.hw, "hw"))
    candidate = _candidate_from_plan_file(_read(args.plan, "plan"), graph, spec)
    violations = validate_plan(candidate, candidate.graph)
    if violations:
        sys.stderr.write("\n".join(f"{v.kind}: {v.detail}" for v in violations) + "\n")
        return EXIT_VALIDATION_ERROR
    report = simulate(candidate, candidate.graph, spec)
    payload = report.to_dict()
    if args.format == "text":
        lines = [
            f"makespan     : {report.makespan} cycles",
            f"duty cycle   : {report.duty_cycle:.4f}",
            f"stalls       : {report.stalls}",
        ]
        _emit(args, "\n".join(lines) + "\n")
    else:
        _emit(args, json.dumps(payload, sort_keys=True) + "\n")
    if args.timeline:
        events = chrome_trace_events(report, candidate)
        Path(args.timeline).write_text(json.dumps({"traceEvents": events}))
    return EXIT_OK


def cmd_search(args) -> int:
    trace = run_search(
        _read(args.graph, "graph"),
        _read(args.hw, "hw"),
        _read(args.space, "space"),
        budget=args.budget,
        parallel=args.threads,
    )
    data = serialize_trace(trace)
    if args.out:
        Path(args.out).write_bytes(data)
    report_lines = [
        f"winner tile      : {trace.plan['tile']} (k_split {trace.plan['tile'][3]})",
        f"stages / stride  : {trace.plan['n_stage']} / {trace.plan['prefetch_stride']}"
        f" (effective {trace.plan['stride_eff']})",
        f"consumer warps   : {trace.plan['consumer_warps']}",
        f"swizzle          : {trace.plan['swizzle']}",
        f"flags            : {trace.plan['flags']}",
        f"duty cycle       : {trace.score['duty_cycle']:.4f}",
        f"makespan         : {trace.score['makespan']} cycles",
        f"stalls           : {trace.score['stall_breakdown']}",
        f"candidates       : enumerated {trace.stats['enumerated']},"
        f" pruned {trace.stats['pruned']}, simulated {trace.stats['simulated']}",
    ]
    sys.stdout.write("\n".join(report_lines) + "\n")
    if not args.out:
        sys.stdout.write(data.decode())
    return EXIT_OK


def cmd_validate(args) -> int:
    graph = load_graph(_read(args.graph, "graph"))
    spec = load_hw_spec(_read(args.hw, "hw"))
    candidate = _candidate_from_plan_file(_read(args.plan, "plan"), graph, spec)
    violations = validate_plan(candidate, candidate.graph)
    if violations:
        _emit(args, "\n".join(f"{v.kind}: {v.detail}" for v in violations) + "\n")
        return EXIT_VALIDATION_ERROR
    _emit(args, "plan is valid\n")
    return EXIT_OK


def cmd_explain(args) -> int:
    solid = parse_trace(Path(_read_path(args.trace, "trace")).read_bytes())
    graph_text = _read(args.graph, "graph")
    hw_text = _read(args.hw, "hw")
    candidate, spec = rebuild_candidate(solid, graph_text, hw_text)
    lines = [
        f"winning configuration (tool {solid.header['tool_version']}):",
        f"  tile {solid.plan['tile']}, stages {solid.plan['n_stage']},"
        f" stride {solid.plan['prefetch_stride']}, swizzle {solid.plan['swizzle']},"
        f" consumer warps {solid.plan['consumer_warps']}",
        f"  duty cycle {solid.score['duty_cycle']:.4f},"
        f" makespan {solid.score['makespan']} cycles",
    ]
    if solid.stats.get("kept", 0) <= 1:
        lines.append("  (single candidate in the search space; no alternatives to compare)")
    enabled = [k for k, v in solid.plan["flags"].items() if v]
    if not enabled:
        lines.append("  no optimization flags enabled")
    base_duty = solid.score["duty_cycle"]
    for flag in enabled:
        flags = dict(solid.plan["flags"])
        flags[flag] = False
        variant_plan = dict(solid.plan)
        variant_plan["flags"] = flags
        variant_solid = type(solid)(
            format_version=solid.format_version,
            header=solid.header,
            plan=variant_plan,
            score=solid.score,
            stats=solid.stats,
        )
        vcand, _ = rebuild_candidate(variant_solid, graph_text, hw_text)
        vreport = simulate(vcand, vcand.graph, spec)
        delta = base_duty - vreport.duty_cycle
        lines.append(
            f"  flag {flag}: duty delta {delta:+.4f}"
            f" (off: {vreport.duty_cycle:.4f}, makespan {vreport.makespan})"
        )
    _emit(args, "\n".join(lines) + "\n")
    return EXIT_OK


def _read_path(path: str | None, what: str) -> str:
    if not path:
        raise MissingInput(f"missing required --{what}")
    if not Path(path).is_file():
        raise MissingInput(f"{what} file not found: {path}")
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mkplan",
        description="Offline schedule planner for persistent-kernel pipelines.",
    )
    parser.add_argument("--version", action="version", version=f"mkplan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = {
        "--graph": "operator graph JSON file",
        "--hw": "hardware spec JSON file",
        "--space": "search space JSON file",
        "--plan": "plan candidate JSON file",
        "--trace": "solidified trace file",
        "--out": "output path (default: stdout)",
    }
    for name, fn in [
        ("lower", cmd_lower), ("dag", cmd_dag), ("plan", cmd_plan),
        ("simulate", cmd_simulate), ("search", cmd_search),
        ("validate", cmd_validate), ("explain", cmd_explain),
    ]:
        p = sub.add_parser(name)
        for flag, help_text in common.items():
            p.add_argument(flag, help=help_text)
        p.add_argument("--budget", type=int, default=10000, help="max simulations")
        p.add_argument("--format", choices=["text", "json"], default="text")
        p.add_argument("--verbose", action="store_true")
        p.add_argument("--threads", type=int, default=None,
                       help="search parallelism (default: MK_PLANNER_THREADS)")
        p.add_argument("--timeline", help="write a Chrome-trace timeline JSON here")
        p.set_defaults(func=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MissingInput as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_MISSING_INPUT
    except (GraphError, ConfigError, TraceFormatError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_PARSE_ERROR
    except NoFeasibleCandidate as exc:
        sys.stderr.write(f"error: {exc}\nprune histogram: {exc.histogram}\n")
        return EXIT_NO_FEASIBLE
    except DeadlockError as exc:
        sys.stderr.write(f"internal error: {exc}\n")
        return EXIT_DEADLOCK
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_VALIDATION_ERROR


if __name__ == "__main__":
    sys.exit(main())
