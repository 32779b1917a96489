"""Hardware resource model for a single streaming multiprocessor.

This module owns the shared-memory page budget (how many fixed-size pages fit
next to the per-stage pipeline overhead), the pipeline-depth formula (how many
stages the pages left over after resident buffers can sustain), the bank
conflict model for swizzled shared-memory access, and the per-micro-op cycle
cost model used by the simulator.

All functions are pure integer arithmetic, safe to call concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum


class MicroOpKind(str, Enum):
    """Instruction-granularity operation classes recognized by the cost model."""

    GlobalToShared = "GlobalToShared"    # async copy HBM -> shared page
    LoadSharedToReg = "LoadSharedToReg"  # warp-level shared -> register load
    Dequant = "Dequant"                  # int4 -> fp16 expansion in registers
    MmaTile = "MmaTile"                  # one tensor-core tile instruction
    Epilogue = "Epilogue"                # bias/activation math on registers
    Reduce = "Reduce"                    # cross-block or gated-path combine
    RegToGlobal = "RegToGlobal"          # result writeback from registers


# Kinds whose cost is sensitive to shared-memory bank conflicts.
SMEM_ACCESS_KINDS = frozenset({MicroOpKind.GlobalToShared, MicroOpKind.LoadSharedToReg})

# Calibration defaults.  Chosen so that a decode-shaped GEMM is bound by the
# load stream rather than by tensor-core math; all overridable via a spec file.
DEFAULT_PAGE_SIZE = 16384
DEFAULT_STAGE_OVERHEAD = {"instr_buf": 2048, "semaphores": 512, "scratch": 1536}
DEFAULT_LATENCY_TABLE = {
    MicroOpKind.GlobalToShared: 64,
    MicroOpKind.LoadSharedToReg: 8,
    MicroOpKind.Dequant: 4,
    MicroOpKind.MmaTile: 16,
    MicroOpKind.Epilogue: 4,
    MicroOpKind.Reduce: 8,
    MicroOpKind.RegToGlobal: 48,
}


class ConfigError(ValueError):
    """Invalid hardware spec, tile config, or cost-model query."""


@dataclass(frozen=True)
class HardwareSpec:
    """Per-SM resource description.

    ``instr_buf``, ``semaphores`` and ``scratch`` are bytes of shared memory
    consumed per pipeline stage before any data page can be allocated.
    ``issue_width`` is the number of operations a role may start per cycle.
    """

    smem_max: int = 131072
    page_size: int = DEFAULT_PAGE_SIZE
    instr_buf: int = DEFAULT_STAGE_OVERHEAD["instr_buf"]
    semaphores: int = DEFAULT_STAGE_OVERHEAD["semaphores"]
    scratch: int = DEFAULT_STAGE_OVERHEAD["scratch"]
    warps_per_sm: int = 32
    banks: int = 32
    lane_width: int = 32
    issue_width: int = 1
    latency_table: dict[MicroOpKind, int] = field(
        default_factory=lambda: dict(DEFAULT_LATENCY_TABLE)
    )

    def __post_init__(self) -> None:
        if self.smem_max <= 0 or self.page_size <= 0:
            raise ConfigError("smem_max and page_size must be positive")
        if self.smem_max // self.page_size < 2:
            raise ConfigError("page_size must fit into smem_max at least twice")
        for name in ("instr_buf", "semaphores", "scratch"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.banks < 1 or self.lane_width < 1 or self.warps_per_sm < 1:
            raise ConfigError("banks, lane_width and warps_per_sm must be >= 1")
        if self.issue_width < 1:
            raise ConfigError("issue_width must be >= 1")
        for kind in MicroOpKind:
            lat = self.latency_table.get(kind)
            if lat is None or lat < 1:
                raise ConfigError(f"latency_table entry for {kind.value} must be >= 1")

    @property
    def stage_overhead(self) -> int:
        return self.instr_buf + self.semaphores + self.scratch


_HW_FILE_FIELDS = {
    "smem_max_bytes",
    "page_size_bytes",
    "stage_overhead",
    "warps_per_sm",
    "banks",
    "lane_width",
    "issue_width",
    "latency_table",
}


def load_hw_spec(text: str) -> HardwareSpec:
    """Parse a hardware spec file (JSON).  Unknown fields are rejected."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"hardware spec is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("hardware spec must be a JSON object")
    unknown = set(raw) - _HW_FILE_FIELDS
    if unknown:
        raise ConfigError(f"unknown hardware spec fields: {sorted(unknown)}")
    overhead = raw.get("stage_overhead", {})
    if not isinstance(overhead, dict) or set(overhead) - set(DEFAULT_STAGE_OVERHEAD):
        raise ConfigError("stage_overhead must be an object with instr_buf/semaphores/scratch")
    latency = dict(DEFAULT_LATENCY_TABLE)
    for key, value in raw.get("latency_table", {}).items():
        try:
            latency[MicroOpKind(key)] = int(value)
        except ValueError as exc:
            raise ConfigError(f"unknown micro-op kind in latency_table: {key}") from exc
    return HardwareSpec(
        smem_max=int(raw.get("smem_max_bytes", 131072)),
        page_size=int(raw.get("page_size_bytes", DEFAULT_PAGE_SIZE)),
        instr_buf=int(overhead.get("instr_buf", DEFAULT_STAGE_OVERHEAD["instr_buf"])),
        semaphores=int(overhead.get("semaphores", DEFAULT_STAGE_OVERHEAD["semaphores"])),
        scratch=int(overhead.get("scratch", DEFAULT_STAGE_OVERHEAD["scratch"])),
        warps_per_sm=int(raw.get("warps_per_sm", 32)),
        banks=int(raw.get("banks", 32)),
        lane_width=int(raw.get("lane_width", 32)),
        issue_width=int(raw.get("issue_width", 1)),
        latency_table=latency,
    )


def hw_spec_to_json(spec: HardwareSpec) -> dict:
    """Canonical JSON form of a spec, used for hashing and file emission."""
    return {
        "smem_max_bytes": spec.smem_max,
        "page_size_bytes": spec.page_size,
        "stage_overhead": {
            "instr_buf": spec.instr_buf,
            "semaphores": spec.semaphores,
            "scratch": spec.scratch,
        },
        "warps_per_sm": spec.warps_per_sm,
        "banks": spec.banks,
        "lane_width": spec.lane_width,
        "issue_width": spec.issue_width,
        "latency_table": {k.value: v for k, v in sorted(spec.latency_table.items())},
    }


@dataclass(frozen=True)
class PageBudget:
    """Page accounting for one plan: total capacity vs. resident reservations.

    ``n_page_per_stage`` is the number of pages one in-flight pipeline
    iteration stages at once; ``n_stage`` is the resulting pipeline depth.
    """

    n_page_total: int
    n_page_weight: int
    n_page_scale: int
    n_page_act: int
    n_page_per_stage: int
    n_stage: int

    def __post_init__(self) -> None:
        for name in ("n_page_total", "n_page_weight", "n_page_scale", "n_page_act",
                     "n_page_per_stage", "n_stage"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        reserved = self.n_page_weight + self.n_page_scale + self.n_page_act
        if self.n_page_total < reserved:
            raise ConfigError("reserved pages exceed total pages")


@dataclass(frozen=True)
class AccessPattern:
    """A strided warp access used to estimate bank conflicts.

    ``swizzle_constant`` is an XOR mask: the page-row index of each word
    (word // banks) is masked and folded back into the word index before the
    bank is taken, which is the standard XOR-swizzle address permutation.
    """

    element_bytes: int
    stride_elements: int
    lanes: int
    swizzle_constant: int = 0

    def __post_init__(self) -> None:
        if self.element_bytes not in (1, 2, 4, 8, 16):
            raise ConfigError("element_bytes must be one of 1,2,4,8,16")
        if self.lanes < 1 or self.stride_elements < 0 or self.swizzle_constant < 0:
            raise ConfigError("invalid access pattern")


def compute_page_budget(spec: HardwareSpec, n_stage: int) -> int:
    """Pages available after ``n_stage`` stages of pipeline overhead.

    floor((smem_max - n_stage * stage_overhead) / page_size), clamped at 0 so
    infeasible depths read as zero pages rather than erroring.
    """
    if n_stage < 0:
        raise ConfigError("n_stage must be >= 0")
    numerator = spec.smem_max - n_stage * spec.stage_overhead
    if numerator <= 0:
        return 0
    return numerator // spec.page_size


def compute_stage_count(
    n_page_total: int,
    n_page_weight: int,
    n_page_scale: int,
    n_page_act: int,
    n_page_per_stage: int,
) -> int:
    """Pipeline depth sustainable by the pages left after resident buffers.

    floor((total - weight - scale - act) / per_stage); 0 means infeasible.
    """
    if n_page_per_stage < 1:
        raise ConfigError("n_page_per_stage must be >= 1")
    numerator = n_page_total - n_page_weight - n_page_scale - n_page_act
    if numerator <= 0:
        return 0
    return numerator // n_page_per_stage


def bank_conflict_factor(pattern: AccessPattern, spec: HardwareSpec) -> int:
    """Worst-case lanes hitting a single bank for one warp access.

    Each lane's word index is lane * stride * element_bytes / 4 (4-byte bank
    words); the swizzle folds the row bits selected by the mask into the word
    index before the bank (mod banks) is taken.  1 means conflict-free.
    """
    if pattern.lanes > spec.lane_width:
        raise ConfigError("pattern lanes exceed lane_width")
    counts: dict[int, int] = {}
    for lane in range(pattern.lanes):
        word = (lane * pattern.stride_elements * pattern.element_bytes) // 4
        swizzled = word ^ ((word // spec.banks) & pattern.swizzle_constant)
        bank = swizzled % spec.banks
        counts[bank] = counts.get(bank, 0) + 1
    return max(counts.values())


def micro_op_cost(op, spec: HardwareSpec, conflict: int = 1) -> int:
    """Cycles for one micro-op: table latency, scaled by the bank-conflict
    multiplier for shared-memory accesses.

    ``op`` may be a MicroOp-like object with a ``kind`` attribute or a
    MicroOpKind directly.
    """
    kind = getattr(op, "kind", op)
    if not isinstance(kind, MicroOpKind):
        try:
            kind = MicroOpKind(kind)
        except ValueError as exc:
            raise ConfigError(f"unknown micro-op kind: {kind!r}") from exc
    base = spec.latency_table.get(kind)
    if base is None:
        raise ConfigError(f"no latency entry for {kind.value}")
    if conflict < 1:
        raise ConfigError("conflict multiplier must be >= 1")
    if kind in SMEM_ACCESS_KINDS:
        return base * conflict
    return base
