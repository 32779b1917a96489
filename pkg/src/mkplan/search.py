"""Budgeted exhaustive schedule search and the solidified execution trace.

The search streams the candidate cross-product in a fixed lexicographic
order, prunes against the hardware budget, simulates survivors up to the
budget, then spends any remaining budget on per-candidate improvement passes
(gap filling, role rebalancing).  Every simulation produces an independent
scored entry; the winner is the entry with the highest duty cycle, ties
broken by lower makespan and then by the smaller candidate encoding, so the
result is a pure function of the inputs regardless of evaluation parallelism.

The winning plan is solidified into a serialized trace: the full candidate
configuration, per-role linear instruction sequences with resolved page ids
and timestamps, the score, and candidate-count statistics, all under a
content hash in canonical JSON form.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import __version__
from .depgraph import node_slack
from .graph_ir import TileConfig, load_graph
from .hwmodel import HardwareSpec, MicroOpKind, hw_spec_to_json, load_hw_spec, micro_op_cost
from .planner import (
    PlanCandidate,
    PlanFlags,
    Role,
    ROLE_ORDER,
    SearchSpace,
    _LoweredCache,
    apply_gap_fill,
    apply_role_rebalance,
    build_candidate,
    enumerate_candidates,
    resource_filter,
    validate_plan,
)
from .simulator import SimReport, conflict_factor_for, simulate

FORMAT_VERSION = 1


class NoFeasibleCandidate(RuntimeError):
    def __init__(self, histogram: dict[str, int]):
        super().__init__(f"all candidates pruned: {histogram}")
        self.histogram = histogram


class TraceFormatError(ValueError):
    pass


def _canon_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def content_hash(obj) -> str:
    return hashlib.sha256(_canon_bytes(obj)).hexdigest()


@dataclass
class ScoredEntry:
    duty: float
    makespan: int
    encoding: str
    candidate: PlanCandidate
    report: SimReport
    variant: str  # "base" | "gap_fill" | "role_rebalance"

    def order_key(self):
        return (-self.duty, self.makespan, self.encoding)


@dataclass
class SolidifiedTrace:
    format_version: int
    header: dict
    plan: dict
    score: dict
    stats: dict
    content_hash: str = ""
    entries: list[ScoredEntry] = field(default_factory=list, repr=False)
    candidate: PlanCandidate | None = field(default=None, repr=False)

    def body_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "header": self.header,
            "plan": self.plan,
            "score": self.score,
            "stats": self.stats,
            "content_hash": self.content_hash,
        }


def serialize_trace(trace: SolidifiedTrace) -> bytes:
    body = trace.body_dict()
    body["content_hash"] = ""
    digest = content_hash(body)
    body["content_hash"] = digest
    trace.content_hash = digest
    return _canon_bytes(body) + b"\n"


def parse_trace(data: bytes) -> SolidifiedTrace:
    try:
        raw = json.loads(data.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TraceFormatError(f"malformed trace file: {exc}") from exc
    for key in ("format_version", "header", "plan", "score", "stats", "content_hash"):
        if key not in raw:
            raise TraceFormatError(f"trace file missing field {key!r}")
    if raw["format_version"] != FORMAT_VERSION:
        raise TraceFormatError(
            f"unsupported trace format_version {raw['format_version']} "
            f"(this tool reads version {FORMAT_VERSION})"
        )
    stated = raw["content_hash"]
    check = dict(raw)
    check["content_hash"] = ""
    if content_hash(check) != stated:
        raise TraceFormatError("content hash mismatch: trace file was modified")
    return SolidifiedTrace(
        format_version=raw["format_version"],
        header=raw["header"],
        plan=raw["plan"],
        score=raw["score"],
        stats=raw["stats"],
        content_hash=stated,
    )


def _plan_dict(candidate: PlanCandidate, report: SimReport) -> dict:
    return {
        "tile": list(candidate.tile.key()),
        "n_stage": candidate.n_stage,
        "consumer_warps": candidate.consumer_warps,
        "prefetch_stride": candidate.prefetch_stride,
        "stride_eff": candidate.stride_eff,
        "swizzle": candidate.swizzle,
        "flags": candidate.flags.as_dict(),
        "role_map": {k.value: v.value for k, v in sorted(candidate.role_map.items())},
        "per_stage": candidate.per_stage,
        "window": candidate.window,
        "pages_required": candidate.pages_required,
        "budget": {
            "n_page_total": candidate.budget.n_page_total,
            "n_page_weight": candidate.budget.n_page_weight,
            "n_page_scale": candidate.budget.n_page_scale,
            "n_page_act": candidate.budget.n_page_act,
            "n_page_per_stage": candidate.budget.n_page_per_stage,
            "n_stage_max": candidate.budget.n_stage,
        },
        "programs": {
            role.value: [
                [op_id, report.op_start[op_id], report.op_finish[op_id]]
                for op_id in candidate.role_programs.get(role, [])
            ]
            for role in ROLE_ORDER
        },
        "page_plan": [
            [a.key, a.page, a.acquire_pos, a.release_pos, a.readers_max_pos,
             -1 if a.pred is None else a.pred]
            for a in candidate.page_plan
        ],
    }


def _score_dict(report: SimReport) -> dict:
    return {
        "duty_cycle": report.duty_cycle,
        "makespan": report.makespan,
        "stall_breakdown": dict(sorted(report.stalls.items())),
        "conflict_factor": report.conflict_factor,
    }


def _slack_for(candidate: PlanCandidate, spec: HardwareSpec) -> dict[int, int]:
    conflict = conflict_factor_for(spec, candidate.swizzle)
    cost = [micro_op_cost(op, spec, conflict) for op in candidate.trace.ops]
    return node_slack(candidate.graph, cost)


def run_search(
    graph_text: str,
    hw_text: str,
    space_text: str,
    budget: int,
    *,
    parallel: int | None = None,
    debug: bool = False,
) -> SolidifiedTrace:
    """Full pipeline: enumerate, prune, simulate, improve, solidify.

    ``budget`` caps the number of simulations, improvement-pass evaluations
    included.  ``parallel`` > 1 evaluates base simulations on a thread pool;
    the reducer applies a total order so the winner does not depend on it.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    op_graph = load_graph(graph_text)
    spec = load_hw_spec(hw_text)
    space = SearchSpace.from_json(space_text)
    if parallel is None:
        parallel = _threads_from_env()

    header = {
        "graph_hash": content_hash(op_graph.canonical_dict()),
        "hw_hash": content_hash(hw_spec_to_json(spec)),
        "space_hash": content_hash(space.canonical_dict()),
        "tool_version": __version__,
    }

    enumerated = 0
    pruned: dict[str, int] = {}
    kept: list[PlanCandidate] = []
    for candidate in enumerate_candidates(op_graph, spec, space):
        enumerated += 1
        ok, reason = resource_filter(candidate, spec)
        if not ok:
            pruned[reason] = pruned.get(reason, 0) + 1
            continue
        violations = validate_plan(candidate, candidate.graph)
        if violations:  # pragma: no cover - indicates a planner bug
            raise RuntimeError(f"planner emitted an invalid plan: {violations[:3]}")
        kept.append(candidate)
    if not kept:
        raise NoFeasibleCandidate(pruned)

    n_base = min(budget, len(kept))
    base_candidates = kept[:n_base]
    if parallel and parallel > 1 and n_base > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            base_reports = list(
                pool.map(lambda c: simulate(c, c.graph, spec), base_candidates)
            )
    else:
        base_reports = [simulate(c, c.graph, spec) for c in base_candidates]

    entries: list[ScoredEntry] = []
    remaining = budget - n_base
    simulated = n_base
    for candidate, report in zip(base_candidates, base_reports):
        entries.append(
            ScoredEntry(
                duty=report.duty_cycle,
                makespan=report.makespan,
                encoding=candidate.encoding(),
                candidate=candidate,
                report=report,
                variant="base",
            )
        )
    for candidate, report in zip(base_candidates, base_reports):
        if remaining <= 0:
            break
        if candidate.flags.gap_fill and remaining > 0:
            remaining -= 1
            simulated += 1
            slack = _slack_for(candidate, spec)
            variant = apply_gap_fill(candidate, candidate.graph, slack, report, spec)
            if variant is not candidate:
                vreport = getattr(variant, "_last_report", None) or simulate(
                    variant, variant.graph, spec
                )
                entries.append(
                    ScoredEntry(
                        duty=vreport.duty_cycle,
                        makespan=vreport.makespan,
                        encoding=variant.encoding(),
                        candidate=variant,
                        report=vreport,
                        variant="gap_fill",
                    )
                )
        if remaining > 0:
            variant = apply_role_rebalance(candidate, report, spec)
            if variant is not candidate:
                remaining -= 1
                simulated += 1
                vreport = getattr(variant, "_last_report", None) or simulate(
                    variant, variant.graph, spec
                )
                entries.append(
                    ScoredEntry(
                        duty=vreport.duty_cycle,
                        makespan=vreport.makespan,
                        encoding=variant.encoding(),
                        candidate=variant,
                        report=vreport,
                        variant="role_rebalance",
                    )
                )

    best = min(entries, key=lambda e: e.order_key())
    stats = {
        "enumerated": enumerated,
        "pruned": dict(sorted(pruned.items())),
        "kept": len(kept),
        "simulated": simulated,
    }
    trace = SolidifiedTrace(
        format_version=FORMAT_VERSION,
        header=header,
        plan=_plan_dict(best.candidate, best.report),
        score=_score_dict(best.report),
        stats=stats,
        entries=entries if debug else [],
        candidate=best.candidate,
    )
    serialize_trace(trace)  # fixes the content hash
    return trace


def _threads_from_env() -> int:
    raw = os.environ.get("MK_PLANNER_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return max(1, os.cpu_count() or 1)


def rebuild_candidate(
    solid: SolidifiedTrace, graph_text: str, hw_text: str
) -> tuple[PlanCandidate, HardwareSpec]:
    """Reconstruct the embedded plan from its inputs (hash-checked)."""
    op_graph = load_graph(graph_text)
    spec = load_hw_spec(hw_text)
    if content_hash(op_graph.canonical_dict()) != solid.header["graph_hash"]:
        raise TraceFormatError("graph file does not match the trace's graph hash")
    if content_hash(hw_spec_to_json(spec)) != solid.header["hw_hash"]:
        raise TraceFormatError("hardware file does not match the trace's hw hash")
    plan = solid.plan
    bm, bn, bk, ks = plan["tile"]
    flags = PlanFlags(**plan["flags"])
    cache = _LoweredCache(op_graph, spec.page_size)
    tile = TileConfig(block_m=bm, block_n=bn, block_k=bk, k_split=ks)
    trace, graph = cache.get(tile, flags.split_reduction)
    candidate = build_candidate(
        op_graph,
        trace,
        graph,
        spec,
        tile=tile,
        n_stage=plan["n_stage"],
        consumer_warps=plan["consumer_warps"],
        prefetch_stride=plan["prefetch_stride"],
        swizzle=plan["swizzle"],
        flags=flags,
    )
    candidate.role_map = {
        MicroOpKind(k): Role(v) for k, v in plan["role_map"].items()
    }
    candidate.role_programs = {
        Role(role): [entry[0] for entry in seq]
        for role, seq in plan["programs"].items()
    }
    return candidate, spec


def compare_traces(a: SolidifiedTrace, b: SolidifiedTrace) -> dict[str, tuple]:
    """Field-wise diff of two solidified traces over the same graph."""
    if a.header["graph_hash"] != b.header["graph_hash"]:
        raise ValueError("traces come from different graphs")
    diff: dict[str, tuple] = {}
    for key in ("duty_cycle", "makespan", "stall_breakdown", "conflict_factor"):
        if a.score.get(key) != b.score.get(key):
            diff[f"score.{key}"] = (a.score.get(key), b.score.get(key))
    for key in ("tile", "n_stage", "consumer_warps", "prefetch_stride", "swizzle",
                "flags", "role_map", "per_stage", "window", "pages_required"):
        if a.plan.get(key) != b.plan.get(key):
            diff[f"plan.{key}"] = (a.plan.get(key), b.plan.get(key))
    if a.plan.get("page_plan") != b.plan.get("page_plan"):
        diff["plan.page_plan"] = (
            len(a.plan.get("page_plan", [])),
            len(b.plan.get("page_plan", [])),
        )
    return diff
