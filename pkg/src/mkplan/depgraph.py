"""Fine-grained dependency DAG over a micro-op trace.

A single forward pass over the program-ordered trace maintains, per buffer, an
interval map of last writers (byte-exact, with partial-overwrite splitting) and
of readers-since-last-write.  Reads query the writer map to produce
read-after-write edges; writes record the readers they displace as
write-after-read constraints and then replace the overlapped writer entries.

RAW edges order computation.  WAR constraints are side data consumed only by
the page planner and validator: they gate when a shared staging range may be
refilled, never when a compute op may issue.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field

from .graph_ir import BufferInterval, MicroOp, MicroOpTrace, Space
from .hwmodel import MicroOpKind


class StructuralError(ValueError):
    """Cycle or inconsistent graph structure."""


@dataclass(frozen=True)
class RawEdge:
    src: int
    dst: int
    buffer_id: str
    lo: int
    hi: int  # witness byte range [lo, hi)


@dataclass(frozen=True)
class WarConstraint:
    reader: int
    writer: int
    buffer_id: str
    lo: int
    hi: int


@dataclass
class DepGraph:
    n_nodes: int
    raw_edges: dict[tuple[int, int], RawEdge] = field(default_factory=dict)
    war_constraints: list[WarConstraint] = field(default_factory=list)
    preds: list[set[int]] = field(default_factory=list)
    succs: list[set[int]] = field(default_factory=list)

    def edge_set(self) -> set[tuple[int, int]]:
        return set(self.raw_edges)

    def add_raw(self, edge: RawEdge) -> None:
        key = (edge.src, edge.dst)
        if key not in self.raw_edges:
            self.raw_edges[key] = edge
            self.succs[edge.src].add(edge.dst)
            self.preds[edge.dst].add(edge.src)


class _IntervalMap:
    """Disjoint byte segments with a payload, kept sorted by start."""

    __slots__ = ("starts", "segs")

    def __init__(self):
        self.starts: list[int] = []
        self.segs: list[list] = []  # [start, end, payload]

    def overlapping(self, lo: int, hi: int):
        """Yield (clipped_lo, clipped_hi, payload) for segments meeting [lo,hi)."""
        i = bisect_right(self.starts, lo) - 1
        if i < 0:
            i = 0
        out = []
        while i < len(self.segs):
            s, e, payload = self.segs[i]
            if s >= hi:
                break
            if e > lo:
                out.append((max(s, lo), min(e, hi), payload))
            i += 1
        return out

    def _delete_range(self, lo: int, hi: int) -> None:
        """Remove [lo,hi) from coverage, splitting boundary segments."""
        i = bisect_right(self.starts, lo) - 1
        if i < 0:
            i = 0
        keep: list[list] = []
        j = i
        while j < len(self.segs):
            s, e, payload = self.segs[j]
            if s >= hi:
                break
            if e <= lo:
                j += 1
                continue
            if s < lo:
                keep.append([s, lo, payload])
            if e > hi:
                keep.append([hi, e, payload])
            self.segs.pop(j)
            self.starts.pop(j)
        for seg in keep:
            pos = bisect_right(self.starts, seg[0])
            self.starts.insert(pos, seg[0])
            self.segs.insert(pos, seg)

    def assign(self, lo: int, hi: int, payload) -> None:
        self._delete_range(lo, hi)
        pos = bisect_right(self.starts, lo)
        self.starts.insert(pos, lo)
        self.segs.insert(pos, [lo, hi, payload])

    def clear(self, lo: int, hi: int) -> None:
        self._delete_range(lo, hi)

    def add_reader(self, lo: int, hi: int, reader: int) -> None:
        """Union ``reader`` into the payload sets covering [lo,hi)."""
        existing = self.overlapping(lo, hi)
        cover = [(s, e, set(p) | {reader}) for s, e, p in existing]
        # Gaps inside [lo,hi) get a fresh singleton set.
        gaps = []
        cursor = lo
        for s, e, _ in cover:
            if s > cursor:
                gaps.append((cursor, s, {reader}))
            cursor = e
        if cursor < hi:
            gaps.append((cursor, hi, {reader}))
        self._delete_range(lo, hi)
        for s, e, p in sorted(cover + gaps):
            pos = bisect_right(self.starts, s)
            self.starts.insert(pos, s)
            self.segs.insert(pos, [s, e, p])


def build_dep_graph(trace: MicroOpTrace) -> DepGraph:
    """RAW edges and WAR constraints via a lastWriters interval analysis.

    An edge src -> dst exists exactly when some byte written by src is read by
    dst with no intervening overwrite of that byte.
    """
    ops = trace.ops
    n = len(ops)
    graph = DepGraph(n_nodes=n, preds=[set() for _ in range(n)], succs=[set() for _ in range(n)])
    writers: dict[str, _IntervalMap] = {}
    readers: dict[str, _IntervalMap] = {}

    for op in ops:
        for r in op.reads:
            wmap = writers.get(r.buffer_id)
            if wmap is not None:
                for lo, hi, writer_id in wmap.overlapping(r.offset, r.end):
                    graph.add_raw(RawEdge(writer_id, op.id, r.buffer_id, lo, hi))
            rmap = readers.setdefault(r.buffer_id, _IntervalMap())
            rmap.add_reader(r.offset, r.end, op.id)
        for w in op.writes:
            rmap = readers.get(w.buffer_id)
            if rmap is not None:
                seen: set[int] = set()
                for lo, hi, reader_set in rmap.overlapping(w.offset, w.end):
                    for rid in sorted(reader_set):
                        if rid != op.id and rid not in seen:
                            seen.add(rid)
                            graph.war_constraints.append(
                                WarConstraint(rid, op.id, w.buffer_id, lo, hi)
                            )
                rmap.clear(w.offset, w.end)
            wmap = writers.setdefault(w.buffer_id, _IntervalMap())
            wmap.assign(w.offset, w.end, op.id)
    return graph


def _topo_order(graph: DepGraph) -> list[int]:
    import heapq

    # Kahn's algorithm; the id-ordered heap keeps the order deterministic.
    indeg = [len(p) for p in graph.preds]
    order: list[int] = []
    heap = [i for i in range(graph.n_nodes) if indeg[i] == 0]
    heapq.heapify(heap)
    while heap:
        v = heapq.heappop(heap)
        order.append(v)
        for s in sorted(graph.succs[v]):
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(heap, s)
    if len(order) != graph.n_nodes:
        raise StructuralError("dependency graph contains a cycle")
    return order


def critical_path(graph: DepGraph, cost) -> tuple[int, list[int]]:
    """Longest path under node costs.

    Ties break toward the lexicographically smallest node-id sequence.
    ``cost`` maps node id -> cycles (dict or sequence).
    """
    n = graph.n_nodes
    if n == 0:
        return 0, []
    order = _topo_order(graph)
    dist = [0] * n  # longest suffix length starting at v, inclusive of v
    nxt: list[int | None] = [None] * n
    for v in reversed(order):
        best_len = 0
        best_next: int | None = None
        for s in sorted(graph.succs[v]):
            if dist[s] > best_len:
                best_len = dist[s]
                best_next = s
        dist[v] = cost[v] + best_len
        nxt[v] = best_next
    start = max(range(n), key=lambda v: (dist[v], -v))
    path = []
    cur: int | None = start
    while cur is not None:
        path.append(cur)
        cur = nxt[cur]
    return dist[start], path


def node_slack(graph: DepGraph, cost) -> dict[int, int]:
    """Latest-start minus earliest-start with the makespan pinned to the
    critical-path length; critical nodes read 0."""
    n = graph.n_nodes
    if n == 0:
        return {}
    order = _topo_order(graph)
    asap = [0] * n
    for v in order:
        for s in graph.succs[v]:
            asap[s] = max(asap[s], asap[v] + cost[v])
    makespan = max(asap[v] + cost[v] for v in range(n))
    latest_finish = [makespan] * n
    for v in reversed(order):
        for s in graph.succs[v]:
            latest_finish[v] = min(latest_finish[v], latest_finish[s] - cost[s])
    return {v: (latest_finish[v] - cost[v]) - asap[v] for v in range(n)}


def split_reduction(graph: DepGraph, trace: MicroOpTrace) -> tuple[DepGraph, MicroOpTrace]:
    """Break multi-input Reduce ops into per-input partials plus a combine.

    A Reduce is splittable when it reads two or more intervals coming from two
    or more distinct producers (for gated dual-path operators these are the
    two gating paths).  Each partial depends only on its own input path, so
    one path's reduction can retire while the other path still computes.
    Identity transform when nothing is splittable.
    """
    split_any = False
    new_ops: list[MicroOp] = []
    for op in trace.ops:
        producers = {
            graph.raw_edges[key].src
            for key in graph.raw_edges
            if key[1] == op.id
        }
        if (
            op.kind != MicroOpKind.Reduce
            or len(op.reads) < 2
            or len(producers) < 2
        ):
            new_ops.append(op)
            continue
        split_any = True
        partial_buf = f"{op.source_operator}/partial{op.id}"
        partials: list[BufferInterval] = []
        for idx, interval in enumerate(op.reads):
            preg = BufferInterval(partial_buf, idx * 64, 64, Space.Register)
            partials.append(preg)
            new_ops.append(
                MicroOp(
                    id=-1,
                    kind=MicroOpKind.Reduce,
                    reads=(interval,),
                    writes=(preg,),
                    tile_coord=op.tile_coord,
                    source_operator=op.source_operator,
                )
            )
        new_ops.append(
            MicroOp(
                id=-1,
                kind=MicroOpKind.Reduce,
                reads=tuple(partials),
                writes=op.writes,
                tile_coord=op.tile_coord,
                source_operator=op.source_operator,
            )
        )
    if not split_any:
        return graph, trace
    renumbered = [
        MicroOp(
            id=i,
            kind=o.kind,
            reads=o.reads,
            writes=o.writes,
            tile_coord=o.tile_coord,
            source_operator=o.source_operator,
        )
        for i, o in enumerate(new_ops)
    ]
    new_trace = MicroOpTrace(ops=renumbered, padding=dict(trace.padding))
    return build_dep_graph(new_trace), new_trace


def to_dot(graph: DepGraph, trace: MicroOpTrace) -> str:
    """DOT rendering: solid edges are data flow, dashed are reuse hazards."""
    lines = ["digraph deps {", "  rankdir=LR;"]
    for op in trace.ops:
        lines.append(f'  n{op.id} [label="{op.id}:{op.kind.value}\\n{op.source_operator}"];')
    for (src, dst), edge in sorted(graph.raw_edges.items()):
        lines.append(f'  n{src} -> n{dst} [label="{edge.buffer_id}"];')
    for war in graph.war_constraints:
        lines.append(f"  n{war.reader} -> n{war.writer} [style=dashed, color=gray];")
    lines.append("}")
    return "\n".join(lines) + "\n"
