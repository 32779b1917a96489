"""Schedule candidate construction: role mapping, page planning, pruning.

A PlanCandidate is one complete hypothesis for executing a lowered trace on
one SM: a tile configuration, a pipeline depth, per-role instruction programs,
a swizzle constant, a physical page assignment for every shared-memory
occupancy, and the optimization flags.

Page model
----------
Shared memory occupancies come in two classes:

* stream chunks -- page-sized pieces written by GlobalToShared fills (weight
  sub-tiles, residual tiles, norm gains).  They rotate through a dedicated
  window of ``n_stage * pages_per_iteration`` pages, the depth of the software
  pipeline between Loader and Consumer.
* resident regions -- page-granular pieces of graph-declared shared buffers
  (pre-staged activations and intermediate results staged by writebacks).
  They are allocated from a recycling free list: a region's page returns to
  the pool at its release position and may then back a later region.

Release timing is where the reuse flags act.  By default a region read as an
activation stays allocated until the operator consuming it has fully finished
(a conservative barrier).  With ``reuse_act_weight`` or ``reuse_act_output``
the region releases as soon as its last register load has retired; with
``reuse_act_weight`` the freed page is donated to the fill window (deepening
the load pipeline), otherwise it returns to the resident pool where the
operator's own result staging typically picks it up.

The prefetch stride is clamped to ``n_stage - 1``: the loader cannot usefully
run further ahead than it has buffers.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, replace
from enum import Enum

from .depgraph import DepGraph, build_dep_graph, split_reduction
from .graph_ir import (
    MicroOp,
    MicroOpTrace,
    OperatorGraph,
    Space,
    TileConfig,
    lower_graph,
    scale_bytes,
)
from .hwmodel import (
    ConfigError,
    HardwareSpec,
    MicroOpKind,
    PageBudget,
    compute_page_budget,
    compute_stage_count,
)


class Role(str, Enum):
    Launcher = "Launcher"
    Loader = "Loader"
    Consumer = "Consumer"
    Storer = "Storer"


ROLE_ORDER = [Role.Launcher, Role.Loader, Role.Consumer, Role.Storer]

DEFAULT_ROLE_OF_KIND: dict[MicroOpKind, Role] = {
    MicroOpKind.GlobalToShared: Role.Loader,
    MicroOpKind.LoadSharedToReg: Role.Consumer,
    MicroOpKind.Dequant: Role.Consumer,
    MicroOpKind.MmaTile: Role.Consumer,
    MicroOpKind.Epilogue: Role.Consumer,
    MicroOpKind.Reduce: Role.Storer,
    MicroOpKind.RegToGlobal: Role.Storer,
}

# Warps reserved for the three service roles (one warp each).
SERVICE_WARPS = 3
REBALANCE_IDLE_THRESHOLD = 0.3


class PageState(str, Enum):
    Empty = "Empty"
    Locked = "Locked"
    Ready = "Ready"


LEGAL_TRANSITIONS = {
    (PageState.Empty, PageState.Locked),
    (PageState.Locked, PageState.Ready),
    (PageState.Ready, PageState.Empty),
}


class PlanError(ValueError):
    """Unbuildable plan (for example, not even one iteration fits)."""


class InsufficientPages(PlanError):
    pass


@dataclass(frozen=True)
class PlanFlags:
    gap_fill: bool = False
    reuse_act_weight: bool = False
    reuse_act_output: bool = False
    split_reduction: bool = False

    def as_dict(self) -> dict[str, bool]:
        return {
            "gap_fill": self.gap_fill,
            "reuse_act_weight": self.reuse_act_weight,
            "reuse_act_output": self.reuse_act_output,
            "split_reduction": self.split_reduction,
        }


@dataclass
class PageAssignment:
    """One occupancy of one physical page.

    ``acquire_pos``/``release_pos`` are trace positions (op ids): the page is
    Locked when the acquiring op starts, Ready when it finishes, and Empty
    again once the releasing op has finished.  ``pred`` indexes the previous
    occupancy of the same page, which must fully release first.
    """

    key: str
    page: int
    acquire_pos: int  # -1 for pre-staged graph inputs (Ready from cycle 0)
    release_pos: int
    readers_max_pos: int
    pred: int | None = None


@dataclass
class PlanCandidate:
    tile: TileConfig
    n_stage: int
    consumer_warps: int
    prefetch_stride: int
    swizzle: int
    flags: PlanFlags
    role_map: dict[MicroOpKind, Role]
    role_overrides: dict[int, Role]
    role_programs: dict[Role, list[int]]
    page_plan: list[PageAssignment]
    stride_eff: int
    per_stage: int
    window: int
    pages_required: int
    budget: PageBudget
    fill_gates: dict[int, int]  # fill op -> op whose *start* ungates the fill
    trace: MicroOpTrace
    graph: DepGraph

    @property
    def consumer_slots(self) -> int:
        return max(1, self.consumer_warps // 4)

    @property
    def total_warps(self) -> int:
        return self.consumer_warps + SERVICE_WARPS

    def role_of(self, op: MicroOp) -> Role:
        return self.role_overrides.get(op.id, self.role_map[op.kind])

    def config_dict(self) -> dict:
        return {
            "tile": list(self.tile.key()),
            "n_stage": self.n_stage,
            "consumer_warps": self.consumer_warps,
            "prefetch_stride": self.prefetch_stride,
            "swizzle": self.swizzle,
            "flags": self.flags.as_dict(),
            "role_overrides": {str(k): v.value for k, v in sorted(self.role_overrides.items())},
            "hoists": self.role_programs_digest(),
        }

    def role_programs_digest(self) -> list:
        """Programs in a serializable form (only kept if reordered)."""
        out = []
        for role in ROLE_ORDER:
            prog = self.role_programs.get(role, [])
            if prog != sorted(prog):
                out.append([role.value, prog])
        return out

    def encoding(self) -> str:
        return json.dumps(self.config_dict(), sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class Violation:
    kind: str  # IllegalTransition | WarViolation | RoleOrderViolation | StrideViolation
    detail: str


@dataclass
class SearchSpace:
    block_m: list[int]
    block_n: list[int]
    block_k: list[int]
    k_split: list[int]
    consumer_warps: list[int]
    n_stage: list[int]
    prefetch_stride: list[int]
    swizzles: list[int]
    flags: dict[str, list[bool]]

    _FIELDS = (
        "block_m", "block_n", "block_k", "k_split", "consumer_warps",
        "n_stage", "prefetch_stride", "swizzles", "flags",
    )
    _FLAG_NAMES = ("gap_fill", "reuse_act_weight", "reuse_act_output", "split_reduction")

    @classmethod
    def from_json(cls, text: str) -> "SearchSpace":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"search space is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict) or set(raw) - set(cls._FIELDS):
            raise ConfigError(
                f"search space fields must be exactly a subset of {cls._FIELDS}"
            )
        flags_raw = raw.get("flags", {})
        if set(flags_raw) - set(cls._FLAG_NAMES):
            raise ConfigError(f"unknown flag grids: {sorted(set(flags_raw) - set(cls._FLAG_NAMES))}")
        flags = {name: [bool(v) for v in flags_raw.get(name, [False])] for name in cls._FLAG_NAMES}
        space = cls(
            block_m=[int(v) for v in raw.get("block_m", [16])],
            block_n=[int(v) for v in raw.get("block_n", [8])],
            block_k=[int(v) for v in raw.get("block_k", [16])],
            k_split=[int(v) for v in raw.get("k_split", [1])],
            consumer_warps=[int(v) for v in raw.get("consumer_warps", [16])],
            n_stage=[int(v) for v in raw.get("n_stage", [2])],
            prefetch_stride=[int(v) for v in raw.get("prefetch_stride", [1])],
            swizzles=[int(v) for v in raw.get("swizzles", [0])],
            flags=flags,
        )
        if not all(getattr(space, f) for f in cls._FIELDS[:-1]):
            raise ConfigError("search space grids must be non-empty")
        return space

    def canonical_dict(self) -> dict:
        return {
            "block_m": sorted(self.block_m),
            "block_n": sorted(self.block_n),
            "block_k": sorted(self.block_k),
            "k_split": sorted(self.k_split),
            "consumer_warps": sorted(self.consumer_warps),
            "n_stage": sorted(self.n_stage),
            "prefetch_stride": sorted(self.prefetch_stride),
            "swizzles": sorted(self.swizzles),
            "flags": {k: sorted(v) for k, v in sorted(self.flags.items())},
        }

    def points(self):
        """Deterministic lexicographic cross-product over sorted grids."""
        flag_grids = [sorted(set(self.flags[name])) for name in self._FLAG_NAMES]
        for values in itertools.product(
            sorted(set(self.block_m)),
            sorted(set(self.block_n)),
            sorted(set(self.block_k)),
            sorted(set(self.k_split)),
            sorted(set(self.consumer_warps)),
            sorted(set(self.n_stage)),
            sorted(set(self.prefetch_stride)),
            sorted(set(self.swizzles)),
            *flag_grids,
        ):
            bm, bn, bk, ks, warps, stages, stride, swz, *flag_vals = values
            yield {
                "block_m": bm,
                "block_n": bn,
                "block_k": bk,
                "k_split": ks,
                "consumer_warps": warps,
                "n_stage": stages,
                "prefetch_stride": stride,
                "swizzle": swz,
                "flags": PlanFlags(**dict(zip(self._FLAG_NAMES, flag_vals))),
            }

    def size(self) -> int:
        n = 1
        for f in ("block_m", "block_n", "block_k", "k_split", "consumer_warps",
                  "n_stage", "prefetch_stride", "swizzles"):
            n *= len(set(getattr(self, f)))
        for name in self._FLAG_NAMES:
            n *= len(set(self.flags[name]))
        return n


def default_role_map(trace: MicroOpTrace) -> dict[MicroOpKind, Role]:
    """Kind-level role assignment: fills to the Loader, register loads and
    math to the Consumer, combines and writebacks to the Storer.  The
    Launcher carries only zero-cost scheduling markers and owns no trace ops.
    """
    return dict(DEFAULT_ROLE_OF_KIND)


def _is_fill(op: MicroOp) -> bool:
    return op.kind == MicroOpKind.GlobalToShared


@dataclass
class _Region:
    key: str
    klass: str  # "act" (read by register loads) or "out" (write-only staging)
    first_write: int  # -1 for pre-staged graph inputs
    last_reader: int
    consumer_op_end: int  # last trace position of the last consuming operator
    readers_max: int


def _operator_spans(trace: MicroOpTrace) -> dict[str, tuple[int, int]]:
    spans: dict[str, tuple[int, int]] = {}
    for op in trace.ops:
        lo, hi = spans.get(op.source_operator, (op.id, op.id))
        spans[op.source_operator] = (min(lo, op.id), max(hi, op.id))
    return spans


def _collect_regions(trace: MicroOpTrace, page_size: int) -> dict[str, _Region]:
    """Page-granular occupancies of graph-declared shared buffers."""
    spans = _operator_spans(trace)
    regions: dict[str, _Region] = {}

    def region_keys(interval) -> list[str]:
        first = interval.offset // page_size
        last = (interval.end - 1) // page_size
        return [f"region:{interval.buffer_id}/{p}" for p in range(first, last + 1)]

    staging_buffers = {
        w.buffer_id for op in trace.ops if _is_fill(op) for w in op.writes
    }
    for op in trace.ops:
        for r in op.reads:
            if r.space != Space.SharedPage or r.buffer_id in staging_buffers:
                continue
            for key in region_keys(r):
                reg = regions.setdefault(
                    key, _Region(key, "out", -1, -1, -1, -1)
                )
                if op.kind == MicroOpKind.LoadSharedToReg:
                    reg.klass = "act"
                    reg.last_reader = max(reg.last_reader, op.id)
                reg.readers_max = max(reg.readers_max, op.id)
                reg.consumer_op_end = max(reg.consumer_op_end, spans[op.source_operator][1])
        for w in op.writes:
            if w.space != Space.SharedPage or w.buffer_id in staging_buffers:
                continue
            for key in region_keys(w):
                reg = regions.setdefault(key, _Region(key, "out", op.id, -1, -1, -1))
                if reg.first_write == -1:
                    reg.first_write = op.id
                reg.consumer_op_end = max(reg.consumer_op_end, spans[op.source_operator][1])
    return regions


def classify_fills(trace: MicroOpTrace) -> tuple[list[int], set[int]]:
    """Partition fills into streamed and re-read ids.

    A staging buffer whose fills keep overwriting the same ranges carries a
    stream (weight sub-tiles, residual tiles): its pages rotate.  A buffer
    whose several fills write pairwise-disjoint ranges is staged once and
    re-read across iterations (norm gains): its pages stay resident.
    """
    by_buffer: dict[str, list[MicroOp]] = {}
    for op in trace.ops:
        if _is_fill(op):
            by_buffer.setdefault(op.writes[0].buffer_id, []).append(op)
    streamed: list[int] = []
    resident: set[int] = set()
    for ops in by_buffer.values():
        if len(ops) >= 2:
            ranges = [(w.offset, w.end) for op in ops for w in op.writes]
            ranges.sort()
            disjoint = all(a[1] <= b[0] for a, b in zip(ranges, ranges[1:]))
            if disjoint:
                resident.update(op.id for op in ops)
                continue
        streamed.extend(op.id for op in ops)
    streamed.sort()
    return streamed, resident


def plan_pages(
    trace: MicroOpTrace,
    war_constraints,
    n_pages: int,
    flags: PlanFlags,
    *,
    n_stage: int,
    page_size: int,
    graph: DepGraph | None = None,
) -> tuple[list[PageAssignment], int]:
    """Assign every shared occupancy to a physical page.

    Returns (assignments, pages_per_iteration).  Raises InsufficientPages when
    the pool cannot hold even one pipeline iteration next to the resident
    peak.  ``war_constraints`` is accepted for symmetry with the dependency
    builder; reuse safety is enforced through release positions, which the
    validator cross-checks against the recorded readers.
    """
    del war_constraints  # release positions subsume the raw constraint list
    streamed_ids, resident_fill_ids = classify_fills(trace)
    fills = [trace.ops[i] for i in streamed_ids]
    per_stage = max((len(op.writes) for op in fills), default=1)
    window = n_stage * per_stage
    if n_pages < per_stage:
        raise InsufficientPages(
            f"pool of {n_pages} pages cannot stage one iteration ({per_stage} pages)"
        )

    assignments: list[PageAssignment] = []
    spans = _operator_spans(trace)
    consumers_by_fill = _fill_consumers(trace, graph)

    # Resident regions: recycling free-list over ids >= window.
    regions = _collect_regions(trace, page_size)
    early_release = flags.reuse_act_weight or flags.reuse_act_output
    region_entries = []
    for key, reg in sorted(regions.items(), key=lambda kv: (max(kv[1].first_write, 0), kv[0])):
        if reg.klass == "act" and early_release and reg.last_reader >= 0:
            release = reg.last_reader
        elif reg.readers_max >= 0 or reg.first_write >= 0:
            release = max(reg.consumer_op_end, reg.first_write)
        else:  # pragma: no cover - region always has a toucher
            continue
        region_entries.append((max(reg.first_write, 0), key, reg, release))
    # Re-read staging chunks live like activation regions, merged per page of
    # their staging buffer (several small gain chunks share one page).
    fillres: dict[str, _Region] = {}
    for fid in sorted(resident_fill_ids):
        op = trace.ops[fid]
        consumers = consumers_by_fill.get(fid, [])
        last_reader = max(consumers) if consumers else fid
        for w in op.writes:
            key = f"fillres:{w.buffer_id}/{w.offset // page_size}"
            reg = fillres.get(key)
            if reg is None:
                reg = _Region(
                    key=key,
                    klass="act",
                    first_write=fid,
                    last_reader=last_reader,
                    consumer_op_end=spans[op.source_operator][1],
                    readers_max=last_reader,
                )
                fillres[key] = reg
            else:
                reg.first_write = min(reg.first_write, fid)
                reg.last_reader = max(reg.last_reader, last_reader)
                reg.readers_max = max(reg.readers_max, last_reader)
                reg.consumer_op_end = max(reg.consumer_op_end, spans[op.source_operator][1])
    for key, reg in sorted(fillres.items()):
        release = reg.last_reader if early_release else max(reg.consumer_op_end, reg.last_reader)
        region_entries.append((reg.first_write, key, reg, release))
    region_entries.sort()

    import heapq

    free_pool: list[int] = []
    pending: list[tuple[int, int, str]] = []  # (release_pos, page_id, klass)
    donations: list[tuple[int, int]] = []  # (available_from_pos, page_id)
    next_fresh = window
    region_assignment_idx: dict[str, int] = {}
    for order_pos, key, reg, release in region_entries:
        while pending and pending[0][0] < order_pos:
            freed_pos, freed_id, klass = heapq.heappop(pending)
            if klass == "act" and flags.reuse_act_weight:
                donations.append((freed_pos, freed_id))
            else:
                heapq.heappush(free_pool, freed_id)
        if free_pool:
            page = heapq.heappop(free_pool)
        else:
            page = next_fresh
            next_fresh += 1
        idx = len(assignments)
        prev = _last_assignment_on(assignments, page)
        assignments.append(
            PageAssignment(
                key=key,
                page=page,
                acquire_pos=reg.first_write,
                release_pos=release,
                readers_max_pos=reg.readers_max,
                pred=prev,
            )
        )
        region_assignment_idx[key] = idx
        heapq.heappush(pending, (release, page, reg.klass))
    if flags.reuse_act_weight:
        while pending:
            freed_pos, freed_id, klass = heapq.heappop(pending)
            if klass == "act":
                donations.append((freed_pos, freed_id))

    # Stream chunks: round-robin over the window slots, extended by donated
    # activation pages once their donors have released.
    slots: list[int] = list(range(window))
    donations.sort()
    donation_i = 0
    cursor = 0
    for op in fills:
        while donation_i < len(donations) and donations[donation_i][0] < op.id:
            slots.append(donations[donation_i][1])
            donation_i += 1
        group_last = _group_release_pos(trace, op, consumers_by_fill, flags, spans)
        for chunk_idx, w in enumerate(op.writes):
            page = slots[(cursor + chunk_idx) % len(slots)]
            prev = _last_assignment_on(assignments, page)
            assignments.append(
                PageAssignment(
                    key=f"fill:{op.id}/{chunk_idx}",
                    page=page,
                    acquire_pos=op.id,
                    release_pos=group_last,
                    readers_max_pos=max(
                        (c for c in consumers_by_fill.get(op.id, [])), default=op.id
                    ),
                    pred=prev,
                )
            )
        cursor += len(op.writes)
    return assignments, per_stage


def _last_assignment_on(assignments: list[PageAssignment], page: int) -> int | None:
    for i in range(len(assignments) - 1, -1, -1):
        if assignments[i].page == page:
            return i
    return None


def _fill_consumers(trace: MicroOpTrace, graph: DepGraph | None) -> dict[int, list[int]]:
    """Ops directly reading each fill's staged data (RAW successors)."""
    out: dict[int, list[int]] = {}
    if graph is None:
        return out
    for (src, dst) in graph.raw_edges:
        op = trace.ops[src]
        if _is_fill(op):
            out.setdefault(src, []).append(dst)
    for v in out.values():
        v.sort()
    return out


def _group_release_pos(
    trace: MicroOpTrace,
    fill: MicroOp,
    consumers_by_fill: dict[int, list[int]],
    flags: PlanFlags,
    spans: dict[str, tuple[int, int]],
) -> int:
    """Stream pages release at the last register load consuming them when
    early release is on, else at the end of the consuming iteration group
    (the last op before the next fill of the same operator, a conservative
    per-stage barrier)."""
    consumers = consumers_by_fill.get(fill.id, [])
    last_reader = max(consumers) if consumers else fill.id
    if flags.reuse_act_weight or flags.reuse_act_output:
        return last_reader
    # Conservative: hold until the consuming group's last op (the op before
    # the next fill of this operator, or the operator end).
    ops = trace.ops
    end = spans[fill.source_operator][1]
    for later in range(fill.id + 1, end + 1):
        if _is_fill(ops[later]) and ops[later].source_operator == fill.source_operator:
            end = later - 1
            break
    return max(end, last_reader)


def _stream_iteration_gates(
    trace: MicroOpTrace, graph: DepGraph, stride_eff: int
) -> dict[int, int]:
    """Start-gates implementing the prefetch stride.

    Fill j of a stream may issue only once the consumer has *started* the
    group belonging to fill j - stride (no gate during ramp-up).  A stream is
    the ordered fill sequence of one (operator, source buffer) pair.
    """
    gates: dict[int, int] = {}
    if stride_eff < 1:
        stride_eff = 0
    consumers = _fill_consumers(trace, graph)
    streamed_ids, _ = classify_fills(trace)
    streams: dict[tuple[str, str], list[int]] = {}
    for fid in streamed_ids:
        op = trace.ops[fid]
        src_buf = op.reads[0].buffer_id if op.reads else ""
        streams.setdefault((op.source_operator, src_buf), []).append(op.id)
    for fill_ids in streams.values():
        for j, fid in enumerate(fill_ids):
            if stride_eff == 0:
                target = j - 1
            else:
                target = j - stride_eff
            if target < 0:
                continue
            prior = consumers.get(fill_ids[target], [])
            if prior:
                gates[fid] = prior[0]
    return gates


def derive_page_budget(
    op_graph: OperatorGraph,
    trace: MicroOpTrace,
    spec: HardwareSpec,
    n_stage: int,
    per_stage: int,
    peak_resident_act: int,
) -> PageBudget:
    """Page accounting for the stage-count formula and the lower summary."""
    total = compute_page_budget(spec, n_stage)
    scale_pages = max(
        (
            -(-scale_bytes(op) // spec.page_size)
            for op in op_graph.operators
            if scale_bytes(op) > 0
        ),
        default=0,
    )
    reserved_weight = 0  # weights are streamed, never resident
    act = min(peak_resident_act, max(total - reserved_weight - scale_pages, 0))
    n_stage_max = 0
    if total - reserved_weight - scale_pages - act > 0:
        n_stage_max = compute_stage_count(total, reserved_weight, scale_pages, act, per_stage)
    return PageBudget(
        n_page_total=total,
        n_page_weight=reserved_weight,
        n_page_scale=scale_pages,
        n_page_act=act,
        n_page_per_stage=per_stage,
        n_stage=n_stage_max,
    )


def _peak_pages(assignments: list[PageAssignment], window: int) -> int:
    """Peak concurrent resident pages (window pages counted separately)."""
    events: list[tuple[int, int]] = []
    for a in assignments:
        if a.page < window or a.key.startswith("fill:"):
            continue
        events.append((max(a.acquire_pos, 0), 1))
        events.append((a.release_pos + 1, -1))
    events.sort()
    live = peak = 0
    for _, delta in events:
        live += delta
        peak = max(peak, live)
    return peak


def build_candidate(
    op_graph: OperatorGraph,
    trace: MicroOpTrace,
    graph: DepGraph,
    spec: HardwareSpec,
    *,
    tile: TileConfig,
    n_stage: int,
    consumer_warps: int,
    prefetch_stride: int,
    swizzle: int,
    flags: PlanFlags,
) -> PlanCandidate:
    """Populate a full candidate (role programs, page plan, gates)."""
    if n_stage < 1:
        raise PlanError("n_stage must be >= 1")
    stride_eff = max(0, min(prefetch_stride, n_stage - 1))
    assignments, per_stage = plan_pages(
        trace,
        graph.war_constraints,
        max(compute_page_budget(spec, n_stage), per_stage_floor(trace)),
        flags,
        n_stage=n_stage,
        page_size=spec.page_size,
        graph=graph,
    )
    window = n_stage * per_stage
    peak_resident = _peak_pages(assignments, window)
    scale_pages = max(
        (
            -(-scale_bytes(op) // spec.page_size)
            for op in op_graph.operators
            if scale_bytes(op) > 0
        ),
        default=0,
    )
    pages_required = window + peak_resident + scale_pages
    budget = derive_page_budget(op_graph, trace, spec, n_stage, per_stage, peak_resident)
    role_map = default_role_map(trace)
    programs = {role: [] for role in ROLE_ORDER}
    for op in trace.ops:
        programs[role_map[op.kind]].append(op.id)
    return PlanCandidate(
        tile=tile,
        n_stage=n_stage,
        consumer_warps=consumer_warps,
        prefetch_stride=prefetch_stride,
        swizzle=swizzle,
        flags=flags,
        role_map=role_map,
        role_overrides={},
        role_programs=programs,
        page_plan=assignments,
        stride_eff=stride_eff,
        per_stage=per_stage,
        window=window,
        pages_required=pages_required,
        budget=budget,
        fill_gates=_stream_iteration_gates(trace, graph, stride_eff),
        trace=trace,
        graph=graph,
    )


def per_stage_floor(trace: MicroOpTrace) -> int:
    streamed_ids, _ = classify_fills(trace)
    return max((len(trace.ops[i].writes) for i in streamed_ids), default=1)


class _LoweredCache:
    """Per-tile lowering and dependency analysis, shared across candidates."""

    def __init__(self, op_graph: OperatorGraph, page_size: int):
        self.op_graph = op_graph
        self.page_size = page_size
        self._cache: dict[tuple, tuple[MicroOpTrace, DepGraph]] = {}

    def get(self, tile: TileConfig, split: bool) -> tuple[MicroOpTrace, DepGraph]:
        key = (*tile.key(), split)
        if key not in self._cache:
            base_key = (*tile.key(), False)
            if base_key not in self._cache:
                trace = lower_graph(self.op_graph, tile, page_bytes=self.page_size)
                self._cache[base_key] = (trace, build_dep_graph(trace))
            if split:
                trace, graph = self._cache[base_key]
                graph2, trace2 = split_reduction(graph, trace)
                self._cache[key] = (trace2, graph2)
        return self._cache[key]


def enumerate_candidates(
    op_graph: OperatorGraph,
    spec: HardwareSpec,
    space: SearchSpace,
    *,
    cache: _LoweredCache | None = None,
):
    """Deterministic candidate stream over the search space cross-product.

    Lowering and dependency analysis are re-derived per tile point (and per
    split_reduction setting) and shared between the candidates that use them.
    """
    cache = cache or _LoweredCache(op_graph, spec.page_size)
    for point in space.points():
        tile = TileConfig(
            block_m=point["block_m"],
            block_n=point["block_n"],
            block_k=point["block_k"],
            k_split=point["k_split"],
        )
        trace, graph = cache.get(tile, point["flags"].split_reduction)
        yield build_candidate(
            op_graph,
            trace,
            graph,
            spec,
            tile=tile,
            n_stage=point["n_stage"],
            consumer_warps=point["consumer_warps"],
            prefetch_stride=point["prefetch_stride"],
            swizzle=point["swizzle"],
            flags=point["flags"],
        )


PRUNE_SMEM = "SmemExceeded"
PRUNE_STAGE = "StageInfeasible"
PRUNE_WARP = "WarpExceeded"


def resource_filter(
    candidate: PlanCandidate, spec: HardwareSpec, graph: DepGraph | None = None
) -> tuple[bool, str | None]:
    """Keep or prune a candidate against the hardware budget.

    Prunes when the peak concurrent page demand exceeds the page budget at
    this depth, when the stage-count formula cannot sustain the requested
    depth, or when the warp allocation exceeds the SM.
    """
    del graph
    if candidate.total_warps > spec.warps_per_sm:
        return False, PRUNE_WARP
    total = compute_page_budget(spec, candidate.n_stage)
    if candidate.pages_required > total:
        return False, PRUNE_SMEM
    if candidate.budget.n_stage < candidate.n_stage:
        return False, PRUNE_STAGE
    return True, None


def naive_baseline_config(space: SearchSpace) -> dict:
    """The reference candidate improvements are measured against: smallest
    tile point of the space, no reduction split, unit prefetch stride, a full
    16-warp consumer group, swizzle 0 and every optimization flag off."""
    return {
        "block_m": min(space.block_m),
        "block_n": min(space.block_n),
        "block_k": min(space.block_k),
        "k_split": 1,
        "consumer_warps": 16,
        "n_stage": min(space.n_stage),
        "prefetch_stride": 1,
        "swizzle": 0,
        "flags": PlanFlags(),
    }


def validate_plan(candidate: PlanCandidate, graph: DepGraph) -> list[Violation]:
    """Structural safety checks; an empty list means the plan is sound.

    (a) page lifecycle transitions are legal and occupancies do not overlap,
    (b) no op reads an occupancy after its page has been handed to the next
        occupant (write-after-read safety),
    (c) each role program is a linear extension of the DAG restricted to it,
    (d) the effective prefetch stride fits the loader's buffer depth.
    """
    violations: list[Violation] = []
    for a in candidate.page_plan:
        if a.acquire_pos > a.release_pos:
            violations.append(
                Violation("IllegalTransition", f"{a.key}: acquire after release")
            )
    by_page: dict[int, list[PageAssignment]] = {}
    for a in candidate.page_plan:
        by_page.setdefault(a.page, []).append(a)
    for page, occupants in sorted(by_page.items()):
        occupants.sort(key=lambda a: (a.acquire_pos, a.key))
        for prev, nxt in zip(occupants, occupants[1:]):
            if nxt.acquire_pos <= prev.release_pos:
                violations.append(
                    Violation(
                        "IllegalTransition",
                        f"page {page}: {nxt.key} acquired at {nxt.acquire_pos} before "
                        f"{prev.key} releases at {prev.release_pos}",
                    )
                )
            if prev.readers_max_pos > prev.release_pos:
                violations.append(
                    Violation(
                        "WarViolation",
                        f"page {page}: {prev.key} is read at {prev.readers_max_pos} "
                        f"after its release at {prev.release_pos}",
                    )
                )
    position = {}
    for role, prog in candidate.role_programs.items():
        for idx, op_id in enumerate(prog):
            position[op_id] = (role, idx)
    for (src, dst) in graph.raw_edges:
        rs, is_ = position.get(src, (None, 0))
        rd, id_ = position.get(dst, (None, 0))
        if rs is not None and rs == rd and is_ > id_:
            violations.append(
                Violation("RoleOrderViolation", f"{src}->{dst} out of order in {rs.value}")
            )
    if candidate.stride_eff + 1 > max(candidate.n_stage, 1):
        violations.append(
            Violation("StrideViolation", "prefetch stride exceeds loader buffer depth")
        )
    return violations


def apply_role_rebalance(
    candidate: PlanCandidate, report, spec: HardwareSpec
) -> PlanCandidate:
    """Forward dequantization to an idle Loader.

    Fires only when the Loader sits idle more than the threshold while the
    Consumer is the busiest role; reverts if re-simulation does not confirm
    at least an equal makespan.
    """
    from .simulator import simulate

    stats = report.role_stats
    loader = stats.get(Role.Loader.value)
    if loader is None or loader["capacity"] == 0:
        return candidate
    loader_idle = 1.0 - loader["busy"] / loader["capacity"]
    busiest = max(
        (r for r in stats if stats[r]["capacity"]),
        key=lambda r: stats[r]["busy"] / stats[r]["capacity"],
        default=None,
    )
    has_dequant = any(op.kind == MicroOpKind.Dequant for op in candidate.trace.ops)
    if loader_idle <= REBALANCE_IDLE_THRESHOLD or busiest != Role.Consumer.value or not has_dequant:
        return candidate
    new_map = dict(candidate.role_map)
    new_map[MicroOpKind.Dequant] = Role.Loader
    programs = {role: [] for role in ROLE_ORDER}
    for op in candidate.trace.ops:
        programs[candidate.role_overrides.get(op.id, new_map[op.kind])].append(op.id)
    variant = replace(candidate, role_map=new_map, role_programs=programs)
    if validate_plan(variant, candidate.graph):
        return candidate
    try:
        new_report = simulate(variant, candidate.graph, spec)
    except Exception:
        return candidate
    if new_report.makespan <= report.makespan:
        variant._last_report = new_report
        return variant
    return candidate


def apply_gap_fill(
    candidate: PlanCandidate,
    graph: DepGraph,
    slack: dict[int, int],
    report,
    spec: HardwareSpec,
) -> PlanCandidate:
    """Hoist positive-slack ops into previously idle issue slots.

    An op may move earlier inside its role program only when everything it
    waits on (data producers, its pages' previous occupants, its stride gate)
    had already finished before the gap it is hoisted into; critical ops keep
    their order.  The variant is kept only if re-simulation confirms the
    makespan did not grow.
    """
    from .simulator import simulate

    release_op_of_pred: dict[int, list[int]] = {}
    plan = candidate.page_plan
    for a in plan:
        if a.pred is not None:
            acquirer = a.acquire_pos
            release_op_of_pred.setdefault(acquirer, []).append(plan[a.pred].release_pos)

    def wait_sources(op_id: int) -> list[int]:
        sources = list(graph.preds[op_id])
        sources.extend(release_op_of_pred.get(op_id, []))
        gate = candidate.fill_gates.get(op_id)
        if gate is not None:
            sources.append(gate)
        return sources

    finish = report.op_finish
    start = report.op_start
    new_programs = {r: list(p) for r, p in candidate.role_programs.items()}
    changed = False
    for role in (Role.Consumer, Role.Storer):
        prog = new_programs[role]
        if len(prog) < 3:
            continue
        # Idle gaps: positions where this op started strictly later than the
        # previous one finished.
        for idx in range(1, len(prog)):
            gap_start = finish[prog[idx - 1]]
            gap_end = start[prog[idx]]
            if gap_end <= gap_start:
                continue
            for j in range(idx + 1, len(prog)):
                cand_op = prog[j]
                if slack.get(cand_op, 0) <= 0:
                    continue
                if all(finish[w] <= gap_start for w in wait_sources(cand_op)):
                    prog.insert(idx, prog.pop(j))
                    changed = True
                    break
            break  # one hoist per role per pass keeps the search budget honest
    if not changed:
        return candidate
    variant = replace(candidate, role_programs=new_programs)
    if validate_plan(variant, graph):
        return candidate
    try:
        new_report = simulate(variant, graph, spec)
    except Exception:
        return candidate
    if new_report.makespan <= report.makespan:
        variant._last_report = new_report
        return variant
    return candidate
