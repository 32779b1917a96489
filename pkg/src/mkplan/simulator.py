"""Deterministic discrete-event simulation of a plan candidate.

Execution model
---------------
Each role runs its program in order.  An op may start once (a) every data
producer has finished, (b) every page it acquires has been released by the
previous occupant, and (c) for streamed fills, the prefetch-stride gate has
opened (the consumer has *started* the iteration ``stride`` steps back).
Roles start at most ``issue_width`` ops per cycle and hold at most one op per
execution slot; the Consumer owns one slot per four warps, the other roles
one each.

``GlobalToShared`` is asynchronous: it occupies the Loader's slot only for a
short issue window, then completes in the background a full latency later
(flipping its pages Locked -> Ready).  Everything else occupies its slot for
the whole cost.  Costs come from the hardware latency table; shared-memory
accesses are scaled by the bank-conflict factor of the candidate's swizzle.

Accounting
----------
Time is integer cycles.  Per role, ``capacity = slots * makespan`` slot-cycles
split into useful busy cycles (table latency, conflict overhead excluded) and
idle.  Consumer idle partitions exactly into PageWait (waiting on staging
fills or page recycling), DepWait (waiting on compute producers or upstream
drain), and IssueWait (bank-conflict replay overhead plus issue-quota waits).
The duty cycle is useful Consumer cycles over Consumer capacity: the search
objective, proportional to throughput for a fixed trace.

Repeated runs on identical inputs produce byte-identical reports; ties are
broken by role order (Launcher < Loader < Consumer < Storer), then op id.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .depgraph import DepGraph
from .hwmodel import (
    AccessPattern,
    HardwareSpec,
    MicroOpKind,
    bank_conflict_factor,
    micro_op_cost,
)
from .planner import ROLE_ORDER, PlanCandidate, Role

# Cycles a fill occupies the Loader slot before going asynchronous.
ASYNC_ISSUE_CYCLES = 4

STALL_PAGE = "PageWait"
STALL_DEP = "DepWait"
STALL_ISSUE = "IssueWait"


class SimulationError(RuntimeError):
    pass


class EmptyTraceError(SimulationError):
    pass


class DeadlockError(SimulationError):
    """No runnable op while unfinished ops remain; indicates a validator gap."""

    def __init__(self, blocked: list[int]):
        super().__init__(f"simulation deadlock; blocked ops: {blocked[:8]}")
        self.blocked = blocked


@dataclass
class SimReport:
    makespan: int
    duty_cycle: float
    consumer_work: int
    role_stats: dict[str, dict[str, int]]
    stalls: dict[str, int]
    op_start: list[int]
    op_finish: list[int]
    page_events: list[tuple[int, int, str, int]]
    conflict_factor: int = 1

    def to_dict(self) -> dict:
        return {
            "makespan": self.makespan,
            "duty_cycle": self.duty_cycle,
            "consumer_work": self.consumer_work,
            "conflict_factor": self.conflict_factor,
            "role_stats": {k: dict(v) for k, v in sorted(self.role_stats.items())},
            "stalls": dict(sorted(self.stalls.items())),
            "op_start": list(self.op_start),
            "op_finish": list(self.op_finish),
            "page_events": [list(e) for e in self.page_events],
        }


def canonical_access_pattern(spec: HardwareSpec, swizzle: int) -> AccessPattern:
    """The strided column access the cost model prices: one word per lane,
    ``banks`` words apart, so an unswizzled layout collides maximally."""
    return AccessPattern(
        element_bytes=4,
        stride_elements=spec.banks,
        lanes=min(spec.lane_width, spec.banks),
        swizzle_constant=swizzle,
    )


def conflict_factor_for(spec: HardwareSpec, swizzle: int) -> int:
    return bank_conflict_factor(canonical_access_pattern(spec, swizzle), spec)


def _slots_for(role: Role, candidate: PlanCandidate, spec: HardwareSpec) -> int:
    base = candidate.consumer_slots if role == Role.Consumer else 1
    return base * spec.issue_width


def simulate(candidate: PlanCandidate, graph: DepGraph, spec: HardwareSpec) -> SimReport:
    """Run the candidate to completion and account every cycle."""
    trace = candidate.trace
    ops = trace.ops
    n = len(ops)
    if n == 0:
        raise EmptyTraceError("cannot simulate an empty trace")

    conflict = conflict_factor_for(spec, candidate.swizzle)
    role_of = [candidate.role_of(op) for op in ops]
    cost = [0] * n
    base_cost = [0] * n
    lane_time = [0] * n
    is_async = [False] * n
    for op in ops:
        c = micro_op_cost(op, spec, conflict)
        b = spec.latency_table[op.kind]
        cost[op.id] = c
        if op.kind == MicroOpKind.GlobalToShared:
            is_async[op.id] = True
            lane_time[op.id] = min(ASYNC_ISSUE_CYCLES, c)
            base_cost[op.id] = lane_time[op.id]
        else:
            lane_time[op.id] = c
            base_cost[op.id] = b

    # Page machinery from the plan.
    plan = candidate.page_plan
    acquire_by_op: dict[int, list[int]] = {}
    release_by_op: dict[int, list[int]] = {}
    page_ready_prestaged: list[int] = []
    acquire_gate: dict[int, list[int]] = {}  # op -> release ops that must finish
    for idx, a in enumerate(plan):
        if a.acquire_pos == -1:
            page_ready_prestaged.append(a.page)
        else:
            acquire_by_op.setdefault(a.acquire_pos, []).append(idx)
        release_by_op.setdefault(a.release_pos, []).append(idx)
        if a.pred is not None and a.acquire_pos >= 0:
            acquire_gate.setdefault(a.acquire_pos, []).append(plan[a.pred].release_pos)

    raw_remaining = [len(graph.preds[i]) for i in range(n)]
    started = [False] * n
    finished = [False] * n
    op_start = [-1] * n
    op_finish = [-1] * n

    programs = {role: list(candidate.role_programs.get(role, [])) for role in ROLE_ORDER}
    heads = {role: 0 for role in ROLE_ORDER}
    slots = {role: _slots_for(role, candidate, spec) for role in ROLE_ORDER}
    in_flight = {role: 0 for role in ROLE_ORDER}
    quota_cycle = {role: -1 for role in ROLE_ORDER}
    quota_used = {role: 0 for role in ROLE_ORDER}

    page_events: list[tuple[int, int, str, int]] = [
        (0, p, "Ready", -1) for p in sorted(page_ready_prestaged)
    ]

    events: dict[int, list[tuple[int, str, int]]] = {}
    heap: list[int] = []

    def push(t: int, kind: str, payload: int, prio: int) -> None:
        if t not in events:
            events[t] = []
            heapq.heappush(heap, t)
        events[t].append((prio, kind, payload))

    def ungated(op_id: int, now: int) -> tuple[bool, str]:
        """Whether op may start; on failure, the stall classification."""
        if raw_remaining[op_id]:
            for p in graph.preds[op_id]:
                if not finished[p]:
                    pk = ops[p].kind
                    if pk == MicroOpKind.GlobalToShared or any(
                        w.space.value == "SharedPage" for w in ops[p].writes
                    ):
                        return False, STALL_PAGE
            return False, STALL_DEP
        for rel in acquire_gate.get(op_id, ()):
            if not finished[rel]:
                return False, STALL_PAGE
        gate = candidate.fill_gates.get(op_id)
        if gate is not None and not started[gate]:
            return False, STALL_PAGE
        return True, ""

    def start_op(op_id: int, now: int) -> None:
        role = role_of[op_id]
        started[op_id] = True
        op_start[op_id] = now
        in_flight[role] += 1
        for idx in acquire_by_op.get(op_id, ()):
            page_events.append((now, plan[idx].page, "Locked", op_id))
        if is_async[op_id]:
            push(now + lane_time[op_id], "lane", op_id, 1)
            push(now + cost[op_id], "finish", op_id, 0)
        else:
            push(now + cost[op_id], "finish", op_id, 0)

    def finish_op(op_id: int, now: int) -> None:
        finished[op_id] = True
        op_finish[op_id] = now
        role = role_of[op_id]
        if not is_async[op_id]:
            in_flight[role] -= 1
        for s in graph.succs[op_id]:
            raw_remaining[s] -= 1
        for idx in acquire_by_op.get(op_id, ()):
            page_events.append((now, plan[idx].page, "Ready", op_id))
        for idx in release_by_op.get(op_id, ()):
            page_events.append((now, plan[idx].page, "Empty", op_id))

    total_started = 0
    now = 0
    push(0, "tick", 0, 2)
    while heap:
        now = heapq.heappop(heap)
        batch = events.pop(now, [])
        batch.sort()
        for _, kind, payload in batch:
            if kind == "finish":
                finish_op(payload, now)
            elif kind == "lane":
                in_flight[role_of[payload]] -= 1
        # Start fixpoint: same-cycle cascades (a consumer start may open a
        # loader stride gate), bounded by the number of ops.
        progress = True
        quota_blocked = False
        while progress:
            progress = False
            for role in ROLE_ORDER:
                prog = programs[role]
                while heads[role] < len(prog):
                    op_id = prog[heads[role]]
                    if in_flight[role] >= slots[role]:
                        break
                    ok, _ = ungated(op_id, now)
                    if not ok:
                        break
                    if quota_cycle[role] != now:
                        quota_cycle[role] = now
                        quota_used[role] = 0
                    if quota_used[role] >= spec.issue_width:
                        quota_blocked = True
                        break
                    quota_used[role] += 1
                    start_op(op_id, now)
                    heads[role] += 1
                    total_started += 1
                    progress = True
        if quota_blocked:
            push(now + 1, "tick", 0, 2)
        if not heap and total_started < n:
            blocked = [i for i in range(n) if not started[i]]
            raise DeadlockError(blocked)

    makespan = max(op_finish)

    # Accounting.
    role_stats: dict[str, dict[str, int]] = {}
    for role in ROLE_ORDER:
        prog = programs[role]
        busy = sum(base_cost[i] for i in prog)
        occupancy = sum(lane_time[i] for i in prog)
        cap = slots[role] * makespan
        role_stats[role.value] = {
            "slots": slots[role],
            "capacity": cap,
            "busy": busy,
            "occupancy": occupancy,
            "idle": cap - busy,
        }

    stalls = _consumer_stalls(
        candidate, graph, spec, programs, role_of, op_start, op_finish,
        lane_time, base_cost, slots, makespan, acquire_gate, ops,
    )
    consumer = role_stats[Role.Consumer.value]
    duty = consumer["busy"] / consumer["capacity"] if consumer["capacity"] else 0.0
    return SimReport(
        makespan=makespan,
        duty_cycle=duty,
        consumer_work=consumer["busy"],
        role_stats=role_stats,
        stalls=stalls,
        op_start=op_start,
        op_finish=op_finish,
        page_events=sorted(page_events),
        conflict_factor=conflict,
    )


def _consumer_stalls(
    candidate, graph, spec, programs, role_of, op_start, op_finish,
    lane_time, base_cost, slots, makespan, acquire_gate, ops,
) -> dict[str, int]:
    """Partition Consumer idle slot-cycles into PageWait/DepWait/IssueWait.

    Piecewise-constant sweep over the in-flight count; every segment with
    free slots is attributed to whatever blocked the next unstarted op at the
    segment start.  Bank-conflict replay overhead lands in IssueWait.
    """
    prog = programs[Role.Consumer]
    nslots = slots[Role.Consumer]
    stalls = {STALL_PAGE: 0, STALL_DEP: 0, STALL_ISSUE: 0}
    overhead = sum(lane_time[i] - base_cost[i] for i in prog)
    stalls[STALL_ISSUE] += overhead

    deltas: dict[int, int] = {}
    for i in prog:
        deltas[op_start[i]] = deltas.get(op_start[i], 0) + 1
        deltas[op_finish[i]] = deltas.get(op_finish[i], 0) - 1
    times = sorted(set(deltas) | {0, makespan})

    def blocker_at(t: int) -> str:
        nxt = None
        for i in prog:
            if op_start[i] > t:
                nxt = i
                break
            if op_start[i] == -1:  # pragma: no cover - all ops start
                nxt = i
                break
        if nxt is None:
            return STALL_DEP  # drain tail: upstream exhausted
        for p in graph.preds[nxt]:
            if op_finish[p] > t:
                pk = ops[p].kind
                if pk == MicroOpKind.GlobalToShared or any(
                    w.space.value == "SharedPage" for w in ops[p].writes
                ):
                    return STALL_PAGE
        for p in graph.preds[nxt]:
            if op_finish[p] > t:
                return STALL_DEP
        for rel in acquire_gate.get(nxt, ()):
            if op_finish[rel] > t:
                return STALL_PAGE
        return STALL_ISSUE  # ready but waiting on an issue slot/quota

    live = 0
    for t0, t1 in zip(times, times[1:]):
        live += deltas.get(t0, 0)
        if t1 <= t0:
            continue
        free = nslots - live
        if free > 0 and t0 < makespan:
            stalls[blocker_at(t0)] += free * (t1 - t0)
    return stalls


def duty_cycle_loss(report_a: SimReport, report_b: SimReport) -> float:
    """Relative duty-cycle drop from configuration a to configuration b."""
    if report_a.duty_cycle == 0:
        raise SimulationError("reference report has zero duty cycle")
    return (report_a.duty_cycle - report_b.duty_cycle) / report_a.duty_cycle


def stall_breakdown(report: SimReport) -> dict[str, int]:
    """The Consumer idle partition (sums to Consumer idle slot-cycles)."""
    return dict(report.stalls)


def chrome_trace_events(report: SimReport, candidate: PlanCandidate) -> list[dict]:
    """Per-role timeline in the Chrome trace event format (one row per role)."""
    tids = {role.value: i for i, role in enumerate(ROLE_ORDER)}
    out = []
    for op in candidate.trace.ops:
        start = report.op_start[op.id]
        finish = report.op_finish[op.id]
        out.append(
            {
                "name": op.kind.value,
                "ph": "X",
                "ts": start,
                "dur": max(finish - start, 0),
                "pid": 0,
                "tid": tids[candidate.role_of(op).value],
                "args": {"op": op.id, "operator": op.source_operator},
            }
        )
    for t, page, state, op_id in report.page_events:
        out.append(
            {
                "name": f"page{page}:{state}",
                "ph": "i",
                "ts": t,
                "pid": 0,
                "tid": len(tids),
                "s": "t",
                "args": {"op": op_id},
            }
        )
    return out
