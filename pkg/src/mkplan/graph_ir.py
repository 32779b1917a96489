"""Operator graph input and lowering to micro-operation traces.

The operator graph describes one transformer decoder layer (plus optionally an
LM head) as a list of coarse operators over named byte buffers.  Lowering
expands each operator, for a given tile configuration, into a program-ordered
trace of instruction-granularity micro-ops carrying exact byte intervals for
every read and write.  Those intervals are the ground truth for all downstream
alias analysis, so the addressing conventions here are deliberately simple:

* Every buffer is a flat byte array.  2D data of R rows by C columns with a
  row-block size ``bm`` is addressed through a block-column-major layout
  ``[ceil(R/bm)][C][bm]``, so a (row-block, column-range) tile is one
  contiguous interval and two tiles overlap in bytes exactly when they overlap
  logically (for producers and consumers sharing one tile configuration).
* Weight-like buffers are read-only graph inputs and are addressed tile-major:
  the sub-tile staged by iteration i starts at i * subtile_bytes.
* Streamed data (weight sub-tiles, residual tiles, norm gains) is copied into
  per-operator shared staging ranges that are reused every iteration; page
  rotation is the planner's job, so the staging range is a fixed logical slot
  and later fills simply overwrite it (write-after-read constraints record the
  reuse hazard).

SharedPage write intervals are chunked to at most one page so that each chunk
can be bound to exactly one physical page by the planner.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

from .hwmodel import DEFAULT_PAGE_SIZE, MicroOpKind

INT4_GROUP_SIZE = 128  # quantization scale group (one fp16 scale per group)


class GraphError(ValueError):
    """Malformed operator graph file or invalid operator field."""


class Space(str, Enum):
    Global = "Global"
    SharedPage = "SharedPage"
    Register = "Register"


class OperatorKind(str, Enum):
    RmsNorm = "RmsNorm"
    Gemm = "Gemm"
    AttentionQK = "AttentionQK"
    Softmax = "Softmax"
    AttentionPV = "AttentionPV"
    Swiglu = "Swiglu"
    ResidualAdd = "ResidualAdd"
    LmHead = "LmHead"


# Operators lowered through the GEMM pipeline template (weight-streaming).
GEMM_LIKE = frozenset(
    {OperatorKind.Gemm, OperatorKind.LmHead, OperatorKind.AttentionQK, OperatorKind.AttentionPV}
)
# Element operators with a row reduction before the epilogue.
ROW_REDUCE_KINDS = frozenset({OperatorKind.RmsNorm, OperatorKind.Softmax})


class DType(str, Enum):
    fp16 = "fp16"
    int4_w4a16 = "int4_w4a16"


def dtype_weight_bits(dtype: DType) -> int:
    return 4 if dtype == DType.int4_w4a16 else 16


@dataclass(frozen=True)
class Buffer:
    id: str
    space: Space
    bytes: int


@dataclass(frozen=True)
class Operator:
    id: str
    kind: OperatorKind
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    m: int
    n: int
    k: int = 0
    dtype: DType = DType.fp16
    weight: str | None = None


@dataclass
class OperatorGraph:
    buffers: dict[str, Buffer]
    operators: list[Operator]

    def producer_index(self) -> dict[str, str]:
        """Map buffer id -> producing operator id (graph inputs absent)."""
        out: dict[str, str] = {}
        for op in self.operators:
            for b in op.outputs:
                out[b] = op.id
        return out

    def canonical_dict(self) -> dict:
        return {
            "buffers": [
                {"id": b.id, "space": b.space.value, "bytes": b.bytes}
                for b in self.buffers.values()
            ],
            "operators": [
                {
                    "id": op.id,
                    "kind": op.kind.value,
                    "dims": {"m": op.m, "n": op.n, "k": op.k},
                    "dtype": op.dtype.value,
                    "inputs": list(op.inputs),
                    "outputs": list(op.outputs),
                    "weight": op.weight,
                }
                for op in self.operators
            ],
        }


@dataclass(frozen=True)
class BufferInterval:
    """Byte range [offset, offset+length) of one buffer in one address space."""

    buffer_id: str
    offset: int
    length: int
    space: Space

    def __post_init__(self) -> None:
        if self.length <= 0:
            raise GraphError(f"interval length must be positive ({self.buffer_id})")

    @property
    def end(self) -> int:
        return self.offset + self.length

    def overlaps(self, other: "BufferInterval") -> bool:
        return (
            self.buffer_id == other.buffer_id
            and self.offset < other.end
            and other.offset < self.end
        )


@dataclass(frozen=True)
class MicroOp:
    id: int
    kind: MicroOpKind
    reads: tuple[BufferInterval, ...]
    writes: tuple[BufferInterval, ...]
    tile_coord: tuple[int, int, int]  # (m, n, k) iteration indices
    source_operator: str


@dataclass
class MicroOpTrace:
    ops: list[MicroOp]
    padding: dict[str, tuple[int, int, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)

    def counts_by_kind(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for op in self.ops:
            counts[op.kind.value] = counts.get(op.kind.value, 0) + 1
        return counts


@dataclass(frozen=True)
class TileConfig:
    """Block tile sizes in elements plus the reduction-dimension split.

    ``k_split`` divides ``block_k``; each GEMM iteration then stages only
    block_k/k_split columns of the weight tile, shrinking the per-iteration
    shared footprint by the split factor.
    """

    block_m: int = 16
    block_n: int = 8
    block_k: int = 16
    k_split: int = 1
    mma_m: int = 16
    mma_n: int = 8
    mma_k: int = 16

    def __post_init__(self) -> None:
        from .hwmodel import ConfigError

        if min(self.block_m, self.block_n, self.block_k) <= 0:
            raise ConfigError("block dims must be positive")
        if self.block_m % self.mma_m or self.block_n % self.mma_n or self.block_k % self.mma_k:
            raise ConfigError("block dims must be multiples of the MMA tile")
        if self.k_split < 1 or self.block_k % self.k_split:
            raise ConfigError("k_split must divide block_k")

    @property
    def sub_k(self) -> int:
        return self.block_k // self.k_split

    def key(self) -> tuple[int, int, int, int]:
        return (self.block_m, self.block_n, self.block_k, self.k_split)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def load_graph(text: str) -> OperatorGraph:
    """Parse and validate an operator graph file (JSON)."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphError(f"graph file is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict) or set(raw) - {"buffers", "operators"}:
        raise GraphError("graph file must be an object with 'buffers' and 'operators'")

    buffers: dict[str, Buffer] = {}
    for i, b in enumerate(raw.get("buffers", [])):
        if set(b) - {"id", "space", "bytes"}:
            raise GraphError(f"buffer #{i}: unknown fields {sorted(set(b) - {'id', 'space', 'bytes'})}")
        try:
            buf = Buffer(id=str(b["id"]), space=Space(b["space"]), bytes=int(b["bytes"]))
        except (KeyError, ValueError) as exc:
            raise GraphError(f"buffer #{i}: {exc}") from exc
        if buf.bytes <= 0:
            raise GraphError(f"buffer {buf.id}: bytes must be positive")
        if buf.id in buffers:
            raise GraphError(f"duplicate buffer id {buf.id}")
        buffers[buf.id] = buf

    operators: list[Operator] = []
    produced: set[str] = set()
    all_produced: set[str] = set()
    for o in raw.get("operators", []):
        if isinstance(o, dict):
            all_produced.update(str(x) for x in o.get("outputs", []))
    seen_ids: set[str] = set()
    allowed = {"id", "kind", "dims", "dtype", "inputs", "outputs", "weight"}
    for i, o in enumerate(raw.get("operators", [])):
        extra = set(o) - allowed
        if extra:
            raise GraphError(f"operator #{i}: unknown fields {sorted(extra)}")
        try:
            kind = OperatorKind(o["kind"])
            dims = o.get("dims", {})
            op = Operator(
                id=str(o["id"]),
                kind=kind,
                inputs=tuple(str(x) for x in o.get("inputs", [])),
                outputs=tuple(str(x) for x in o.get("outputs", [])),
                m=int(dims.get("m", 0)),
                n=int(dims.get("n", 0)),
                k=int(dims.get("k", 0)),
                dtype=DType(o.get("dtype", "fp16")),
                weight=o.get("weight"),
            )
        except (KeyError, ValueError) as exc:
            raise GraphError(f"operator #{i}: {exc}") from exc
        if op.id in seen_ids:
            raise GraphError(f"duplicate operator id {op.id}")
        seen_ids.add(op.id)
        if op.m <= 0 or op.n <= 0:
            raise GraphError(f"operator {op.id}: dims must be positive")
        if op.kind in GEMM_LIKE and op.k <= 0:
            raise GraphError(f"operator {op.id}: GEMM-like operator requires m, n, k")
        for ref in (*op.inputs, *op.outputs):
            if ref not in buffers:
                raise GraphError(f"operator {op.id}: dangling buffer reference {ref!r}")
        if op.weight is not None and op.weight not in buffers:
            raise GraphError(f"operator {op.id}: dangling weight buffer {op.weight!r}")
        for ref in op.inputs:
            # Inputs must be graph inputs (never produced) or already produced.
            if ref in all_produced and ref not in produced:
                raise GraphError(
                    f"operator {op.id}: input {ref!r} produced by a later operator"
                )
        produced.update(op.outputs)
        operators.append(op)
    return OperatorGraph(buffers=buffers, operators=operators)


def weight_bytes(op: Operator, dtype: DType | None = None) -> int:
    """Resident weight bytes for a GEMM-like operator (packed data + scales)."""
    if op.weight is None:
        raise GraphError(f"operator {op.id} has no weight buffer")
    d = dtype or op.dtype
    if d == DType.fp16:
        return op.n * op.k * 2
    packed = op.n * op.k // 2
    scales = op.n * _ceil_div(op.k, INT4_GROUP_SIZE) * 2
    return packed + scales


def weight_subtile_bytes(op: Operator, tiles: TileConfig) -> int:
    """Bytes one iteration stages in shared memory for the weight sub-tile."""
    bits = dtype_weight_bits(op.dtype) if op.kind in (OperatorKind.Gemm, OperatorKind.LmHead) else 16
    return tiles.block_n * tiles.sub_k * bits // 8


def scale_bytes(op: Operator) -> int:
    """Resident quantization-scale bytes for an int4 operator, else 0."""
    if op.kind not in (OperatorKind.Gemm, OperatorKind.LmHead) or op.dtype != DType.int4_w4a16:
        return 0
    return op.n * _ceil_div(op.k, INT4_GROUP_SIZE) * 2


def _block2d(buffer_id: str, space: Space, cols_total: int, row_block: int,
             rb: int, c0: int, c1: int, elem: int) -> BufferInterval:
    """Interval of the (row-block rb, columns [c0,c1)) tile under the
    block-column-major layout described in the module docstring."""
    offset = (rb * cols_total + c0) * row_block * elem
    length = (c1 - c0) * row_block * elem
    return BufferInterval(buffer_id, offset, length, space)


def _chunk_shared(interval: BufferInterval, page_bytes: int) -> tuple[BufferInterval, ...]:
    """Split a shared write into page-sized chunks (planner binds one page each)."""
    if interval.space != Space.SharedPage or interval.length <= page_bytes:
        return (interval,)
    chunks = []
    off = interval.offset
    remaining = interval.length
    while remaining > 0:
        step = min(page_bytes, remaining)
        chunks.append(BufferInterval(interval.buffer_id, off, step, interval.space))
        off += step
        remaining -= step
    return tuple(chunks)


class _Emitter:
    """Accumulates micro-ops with dense ids and synthetic register ranges."""

    def __init__(self, id_base: int, page_bytes: int):
        self.ops: list[MicroOp] = []
        self.next_id = id_base
        self.page_bytes = page_bytes
        self._reg_cursor: dict[str, int] = {}

    def reg(self, buffer_id: str, length: int = 64) -> BufferInterval:
        """A fresh register-space interval (unique, never aliased)."""
        off = self._reg_cursor.get(buffer_id, 0)
        self._reg_cursor[buffer_id] = off + length
        return BufferInterval(buffer_id, off, length, Space.Register)

    def emit(self, kind: MicroOpKind, reads, writes, coord, source) -> MicroOp:
        chunked_writes: list[BufferInterval] = []
        for w in writes:
            chunked_writes.extend(_chunk_shared(w, self.page_bytes))
        op = MicroOp(
            id=self.next_id,
            kind=kind,
            reads=tuple(reads),
            writes=tuple(chunked_writes),
            tile_coord=coord,
            source_operator=source,
        )
        self.next_id += 1
        self.ops.append(op)
        return op


def _space_of(graph: OperatorGraph, buffer_id: str) -> Space:
    return graph.buffers[buffer_id].space


def _lower_gemm(em: _Emitter, graph: OperatorGraph, op: Operator, tiles: TileConfig) -> None:
    """Weight-streaming pipeline: per (m, n, k-sub) iteration one weight fill,
    the activation and weight register loads, dequantization when the weight
    is int4, and the tensor-core tiles; per (m, n) an epilogue, a cross-block
    combine when K spans several blocks, and the writeback."""
    act_id = op.inputs[0]
    out_id = op.outputs[0]
    wt_id = op.weight
    if wt_id is None:
        raise GraphError(f"operator {op.id}: GEMM-like operator requires a weight buffer")
    int4 = op.kind in (OperatorKind.Gemm, OperatorKind.LmHead) and op.dtype == DType.int4_w4a16

    mb = _ceil_div(op.m, tiles.block_m)
    nb = _ceil_div(op.n, tiles.block_n)
    kb = _ceil_div(op.k, tiles.block_k)
    sub_bytes = weight_subtile_bytes(op, tiles)
    mma_per_group = (
        (tiles.block_m // tiles.mma_m)
        * (tiles.block_n // tiles.mma_n)
        * _ceil_div(tiles.sub_k, tiles.mma_k)
    )
    act_space = _space_of(graph, act_id)
    stage_id = f"{op.id}/wstage"
    regs = f"{op.id}/regs"
    acc_id = f"{op.id}/acc"

    for im in range(mb):
        for iN in range(nb):
            acc = BufferInterval(acc_id, (im * nb + iN) * 256, 256, Space.Register)
            for ik in range(kb):
                for isplit in range(tiles.k_split):
                    kidx = ik * tiles.k_split + isplit
                    coord = (im, iN, kidx)
                    src_off = ((iN * kb + ik) * tiles.k_split + isplit) * sub_bytes
                    fill = em.emit(
                        MicroOpKind.GlobalToShared,
                        reads=[BufferInterval(wt_id, src_off, sub_bytes, Space.Global)],
                        writes=[BufferInterval(stage_id, 0, sub_bytes, Space.SharedPage)],
                        coord=coord,
                        source=op.id,
                    )
                    k0 = ik * tiles.block_k + isplit * tiles.sub_k
                    act_tile = _block2d(
                        act_id, act_space, op.k, tiles.block_m, im, k0, k0 + tiles.sub_k, 2
                    )
                    act_reg = em.reg(regs)
                    em.emit(MicroOpKind.LoadSharedToReg, [act_tile], [act_reg], coord, op.id)
                    wt_reg = em.reg(regs)
                    em.emit(
                        MicroOpKind.LoadSharedToReg, list(fill.writes), [wt_reg], coord, op.id
                    )
                    mma_in = wt_reg
                    if int4:
                        dq_reg = em.reg(regs)
                        em.emit(MicroOpKind.Dequant, [wt_reg], [dq_reg], coord, op.id)
                        mma_in = dq_reg
                    for _ in range(mma_per_group):
                        em.emit(
                            MicroOpKind.MmaTile, [act_reg, mma_in, acc], [acc], coord, op.id
                        )
            tail_coord = (im, iN, kb * tiles.k_split - 1)
            epi_reg = em.reg(regs)
            em.emit(MicroOpKind.Epilogue, [acc], [epi_reg], tail_coord, op.id)
            result = epi_reg
            if kb > 1:
                red_reg = em.reg(regs)
                em.emit(MicroOpKind.Reduce, [epi_reg], [red_reg], tail_coord, op.id)
                result = red_reg
            out_space = _space_of(graph, out_id)
            n0 = iN * tiles.block_n
            out_tile = _block2d(out_id, out_space, op.n, tiles.block_m, im, n0, n0 + tiles.block_n, 2)
            em.emit(MicroOpKind.RegToGlobal, [result], [out_tile], tail_coord, op.id)


def _lower_element(em: _Emitter, graph: OperatorGraph, op: Operator, tiles: TileConfig) -> None:
    """Element-wise operators walk (row-block, column-chunk) tiles with the
    same page discipline: stage any global operand, load to registers, do a
    row reduction when the operator needs one, then epilogue and writeback."""
    out_id = op.outputs[0]
    regs = f"{op.id}/regs"
    mb = _ceil_div(op.m, tiles.block_m)
    cb = _ceil_div(op.n, tiles.block_n)

    if op.kind == OperatorKind.Swiglu:
        # Gated dual path: input holds [up | gate] halves of width n each.
        src = op.inputs[0]
        src_space = _space_of(graph, src)
        for im in range(mb):
            for ic in range(cb):
                coord = (im, ic, 0)
                c0 = ic * tiles.block_n
                c1 = c0 + tiles.block_n
                up = _block2d(src, src_space, 2 * op.n, tiles.block_m, im, c0, c1, 2)
                gate = _block2d(src, src_space, 2 * op.n, tiles.block_m, im, op.n + c0, op.n + c1, 2)
                up_reg = em.reg(regs)
                em.emit(MicroOpKind.LoadSharedToReg, [up], [up_reg], coord, op.id)
                gate_reg = em.reg(regs)
                em.emit(MicroOpKind.LoadSharedToReg, [gate], [gate_reg], coord, op.id)
                gated = em.reg(regs)
                em.emit(MicroOpKind.Epilogue, [gate_reg], [gated], coord, op.id)
                comb = em.reg(regs)
                # Combines the two producer paths; split_reduction may break
                # this into per-path partials plus a final combine.
                em.emit(MicroOpKind.Reduce, [up_reg, gated], [comb], coord, op.id)
                out_tile = _block2d(out_id, _space_of(graph, out_id), op.n, tiles.block_m, im, c0, c1, 2)
                em.emit(MicroOpKind.RegToGlobal, [comb], [out_tile], coord, op.id)
        return

    main_in = op.inputs[0]
    main_space = _space_of(graph, main_in)
    aux_in = op.inputs[1] if len(op.inputs) > 1 else None  # residual stream
    gain = op.weight  # norm gain vector, streamed once per column chunk
    gain_stage = f"{op.id}/gstage"
    res_stage = f"{op.id}/rstage"
    gain_chunks: dict[int, MicroOp] = {}

    for im in range(mb):
        act_regs: list[BufferInterval] = []
        chunk_ops: list[tuple[int, BufferInterval, BufferInterval | None]] = []
        for ic in range(cb):
            coord = (im, ic, 0)
            c0 = ic * tiles.block_n
            c1 = c0 + tiles.block_n
            if gain is not None and im == 0:
                gain_chunks[ic] = em.emit(
                    MicroOpKind.GlobalToShared,
                    [BufferInterval(gain, c0 * 2, (c1 - c0) * 2, Space.Global)],
                    [BufferInterval(gain_stage, c0 * 2, (c1 - c0) * 2, Space.SharedPage)],
                    coord,
                    op.id,
                )
            res_reg = None
            if aux_in is not None:
                res_tile = _block2d(aux_in, _space_of(graph, aux_in), op.n, tiles.block_m, im, c0, c1, 2)
                staged = BufferInterval(
                    res_stage, (im * cb + ic) % 2 * tiles.block_m * tiles.block_n * 2,
                    tiles.block_m * (c1 - c0) * 2, Space.SharedPage,
                )
                if _space_of(graph, aux_in) == Space.Global:
                    em.emit(MicroOpKind.GlobalToShared, [res_tile], [staged], coord, op.id)
                    res_src = staged
                else:
                    res_src = res_tile
                res_reg = em.reg(regs)
                em.emit(MicroOpKind.LoadSharedToReg, [res_src], [res_reg], coord, op.id)
            tile = _block2d(main_in, main_space, op.n, tiles.block_m, im, c0, c1, 2)
            act_reg = em.reg(regs)
            em.emit(MicroOpKind.LoadSharedToReg, [tile], [act_reg], coord, op.id)
            act_regs.append(act_reg)
            chunk_ops.append((ic, act_reg, res_reg))

        red_reg = None
        if op.kind in ROW_REDUCE_KINDS:
            red_reg = em.reg(regs)
            em.emit(MicroOpKind.Reduce, act_regs, [red_reg], (im, 0, 0), op.id)

        for ic, act_reg, res_reg in chunk_ops:
            coord = (im, ic, 0)
            c0 = ic * tiles.block_n
            c1 = c0 + tiles.block_n
            epi_reads = [act_reg]
            if red_reg is not None:
                epi_reads.append(red_reg)
            if res_reg is not None:
                epi_reads.append(res_reg)
            if gain is not None:
                g_reg = em.reg(regs)
                em.emit(
                    MicroOpKind.LoadSharedToReg,
                    list(gain_chunks[ic].writes),
                    [g_reg],
                    coord,
                    op.id,
                )
                epi_reads.append(g_reg)
            epi_reg = em.reg(regs)
            em.emit(MicroOpKind.Epilogue, epi_reads, [epi_reg], coord, op.id)
            out_tile = _block2d(out_id, _space_of(graph, out_id), op.n, tiles.block_m, im, c0, c1, 2)
            em.emit(MicroOpKind.RegToGlobal, [epi_reg], [out_tile], coord, op.id)


def lower_operator(
    op: Operator,
    tiles: TileConfig,
    *,
    graph: OperatorGraph,
    page_bytes: int = DEFAULT_PAGE_SIZE,
    id_base: int = 0,
) -> list[MicroOp]:
    """Lower one operator into program-ordered micro-ops."""
    em = _Emitter(id_base, page_bytes)
    if op.kind in GEMM_LIKE:
        _lower_gemm(em, graph, op, tiles)
    elif op.kind in (OperatorKind.RmsNorm, OperatorKind.Softmax, OperatorKind.Swiglu,
                     OperatorKind.ResidualAdd):
        _lower_element(em, graph, op, tiles)
    else:  # pragma: no cover - kinds are a closed enum
        raise GraphError(f"unsupported operator kind {op.kind}")
    return em.ops


def lower_graph(
    graph: OperatorGraph,
    tiles: TileConfig,
    *,
    page_bytes: int = DEFAULT_PAGE_SIZE,
) -> MicroOpTrace:
    """Concatenated per-operator traces in graph order; ids dense from 0."""
    ops: list[MicroOp] = []
    padding: dict[str, tuple[int, int, int]] = {}
    for op in graph.operators:
        ops.extend(lower_operator(op, tiles, graph=graph, page_bytes=page_bytes, id_base=len(ops)))
        pm = _ceil_div(op.m, tiles.block_m) * tiles.block_m - op.m
        pn = _ceil_div(op.n, tiles.block_n) * tiles.block_n - op.n
        pk = (_ceil_div(op.k, tiles.block_k) * tiles.block_k - op.k) if op.k else 0
        if pm or pn or pk:
            padding[op.id] = (pm, pn, pk)
    return MicroOpTrace(ops=ops, padding=padding)
