"""Delta-region defragmentation: cost model, strategy choice, executor.

Copying committed delta versions back over their origin rows can be done by
the CPU (read delta, write data, all over the shared bus) or by the PIM
units (CPU broadcasts the version metadata to every device, units copy
device-locally). With n delta versions, p*n of them the newest for distinct
rows, m metadata bytes per version, and a part of d devices at stride w:

    cpu cost = (m*n + 2*n*p*d*w) / bdw_cpu
    pim cost = (m*n + d*m*n) / bdw_cpu + (d*m*n + 2*n*p*d*w) / bdw_pim

PIM wins exactly when w exceeds m*(bdw_pim + bdw_cpu) / (2*p*(bdw_pim -
bdw_cpu)), independent of d and n, so the planner decides per part from the
closed-form width threshold alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DefragError
from .geometry import Geometry
from .memory import MemorySystem
from .mvcc import DATA, DELTA, TOMBSTONE, TableStore, VersionMeta

CPU_STRATEGY = "cpu"
PIM_STRATEGY = "pim"
DEFAULT_METADATA_BYTES = 16
DEFAULT_FIXED_OVERHEAD = 25e-6


@dataclass(frozen=True)
class DefragParams:
    devices: int
    row_width: int
    metadata_bytes: float
    delta_rows: float
    update_fraction: float
    cpu_bandwidth: float
    pim_bandwidth: float

    def __post_init__(self):
        if self.devices < 1 or self.row_width <= 0:
            raise DefragError("devices and row_width must be positive")
        if self.metadata_bytes <= 0:
            raise DefragError("metadata_bytes must be positive")
        if self.delta_rows < 0:
            raise DefragError("delta_rows must be >= 0")
        if not (0.0 < self.update_fraction <= 1.0):
            raise DefragError("update_fraction must lie in (0, 1]")
        if self.cpu_bandwidth <= 0 or self.pim_bandwidth <= 0:
            raise DefragError("bandwidths must be positive")


def comm_cpu_cost(params: DefragParams) -> float:
    """Seconds for the CPU to merge the delta region itself."""
    m, n, p = params.metadata_bytes, params.delta_rows, params.update_fraction
    d, w = params.devices, params.row_width
    return (m * n + 2 * n * p * d * w) / params.cpu_bandwidth


def comm_pim_cost(params: DefragParams) -> float:
    """Seconds for the PIM units to merge after a metadata broadcast."""
    m, n, p = params.metadata_bytes, params.delta_rows, params.update_fraction
    d, w = params.devices, params.row_width
    cpu_part = (m * n + d * m * n) / params.cpu_bandwidth
    pim_part = (d * m * n + 2 * n * p * d * w) / params.pim_bandwidth
    return cpu_part + pim_part


def pim_threshold_width(params: DefragParams) -> float | None:
    """Stride width above which PIM wins; None when PIM cannot win."""
    if params.pim_bandwidth <= params.cpu_bandwidth:
        return None
    m, p = params.metadata_bytes, params.update_fraction
    return m * (params.pim_bandwidth + params.cpu_bandwidth) / (
        2 * p * (params.pim_bandwidth - params.cpu_bandwidth))


@dataclass(frozen=True)
class DefragChoice:
    strategy: str
    threshold_width: float | None
    reason: str


def explain_choice(params: DefragParams) -> DefragChoice:
    t = pim_threshold_width(params)
    if t is None:
        return DefragChoice(CPU_STRATEGY, None,
                            "PIM bandwidth does not exceed CPU bandwidth")
    if params.row_width > t:
        return DefragChoice(PIM_STRATEGY, t,
                            "row_width %g exceeds threshold %g" % (params.row_width, t))
    return DefragChoice(CPU_STRATEGY, t,
                        "row_width %g within threshold %g" % (params.row_width, t))


def choose_strategy(params: DefragParams) -> str:
    """CPU or PIM by the closed-form width threshold; ties go to the CPU."""
    return explain_choice(params).strategy


@dataclass
class PartDefrag:
    part_id: int
    row_width: int
    strategy: str
    cost: float
    bytes_moved: float


@dataclass
class DefragReport:
    strategy: str
    rows_copied: int
    rows_dropped: int
    delta_versions: int
    update_fraction: float
    elapsed: float
    parts: list[PartDefrag]

    def strategy_of(self, part_id: int) -> str:
        for p in self.parts:
            if p.part_id == part_id:
                return p.strategy
        raise DefragError("no part %d in report" % part_id)


def measure(store: TableStore):
    """(n, p): delta version count and distinct-row fraction."""
    n = 0
    distinct = 0
    for v in store.newest:
        k = 0
        u = v
        while u is not None:
            if u.region == DELTA:
                k += 1
            u = u.prev
        n += k
        if v.region == DELTA:
            distinct += 1
    p = distinct / n if n else 1.0
    return n, p


def defragment(store: TableStore, geometry: Geometry,
               strategy: str = "auto",
               metadata_bytes: float = DEFAULT_METADATA_BYTES,
               fixed_overhead: float = DEFAULT_FIXED_OVERHEAD,
               memory: MemorySystem | None = None) -> DefragReport:
    """Fold newest versions into the data region and reset the delta region.

    ``strategy`` is ``"auto"`` (per-part choice by the width threshold),
    ``"cpu"``, or ``"pim"``. Pre-defragmentation snapshots are invalidated:
    old versions are gone afterwards, so the store's snapshot floor moves to
    the last commit. Running with open transactions is a contract violation.
    """
    if store.has_open_transactions():
        raise DefragError("defragmentation may not run mid-transaction")
    if strategy not in ("auto", CPU_STRATEGY, PIM_STRATEGY):
        raise DefragError("unknown strategy %r" % strategy)
    memory = memory if memory is not None else store.memory

    n, p = measure(store)
    parts = []
    total_elapsed = fixed_overhead if n else 0.0
    if memory is not None and n:
        memory.bill("cpu", fixed_overhead, label="defrag-plan")
    for part in store.layout.parts:
        if n == 0:
            break
        params = DefragParams(part.devices, part.row_width, metadata_bytes,
                              n, p, geometry.cpu_bandwidth,
                              geometry.pim_rank_bandwidth)
        # decide on the totals that will actually be paid: offloading a part
        # adds two bank handovers on top of the communication cost
        cpu_total = comm_cpu_cost(params)
        pim_total = comm_pim_cost(params) + 2 * geometry.handover_latency
        if strategy == "auto":
            chosen = CPU_STRATEGY if cpu_total <= pim_total else PIM_STRATEGY
        else:
            chosen = strategy
        if chosen == CPU_STRATEGY:
            cost = cpu_total
            moved = params.metadata_bytes * n + 2 * n * p * part.devices * part.row_width
            if memory is not None:
                memory.bill("cpu", cost, int(moved), label="defrag-cpu")
        else:
            cost = pim_total
            moved = (params.metadata_bytes * n * (1 + part.devices)
                     + part.devices * params.metadata_bytes * n
                     + 2 * n * p * part.devices * part.row_width)
            if memory is not None:
                banks = [(part.channel, part.rank, b)
                         for b in range(geometry.banks_per_device)]
                m = params.metadata_bytes
                memory.handover(banks, "pim")
                memory.bill("cpu", (m * n + part.devices * m * n) / params.cpu_bandwidth,
                            int(m * n * (1 + part.devices)), label="defrag-meta")
                memory.bill("pim",
                            (part.devices * m * n + 2 * n * p * part.devices * part.row_width)
                            / params.pim_bandwidth,
                            int(part.devices * m * n + 2 * n * p * part.devices * part.row_width),
                            label="defrag-pim")
                memory.handover(banks, "cpu")
        parts.append(PartDefrag(part.part_id, part.row_width, chosen, cost, moved))
        total_elapsed += cost

    # semantic rewrite: install each row's newest version at its origin slot
    rows_copied = 0
    rows_dropped = 0
    copy_rows = []
    copy_slots = []
    for row, v in enumerate(store.newest):
        if v.region == DELTA:
            copy_rows.append(row)
            copy_slots.append(v.pos)
        elif v.tombstone:
            rows_dropped += 1
    if copy_rows:
        slots = np.asarray(copy_slots, dtype=np.int64)
        images = store.delta.read_rows(slots)
        store.data.write_rows(np.asarray(copy_rows, dtype=np.int64), images)
        rows_copied = len(copy_rows)
    new_log: list[VersionMeta] = []
    for row, v in enumerate(store.newest):
        if v.tombstone:
            flat = VersionMeta(v.version_id, row, TOMBSTONE, -1, v.write_ts)
        else:
            flat = VersionMeta(v.version_id, row, DATA, row, v.write_ts)
        flat.read_ts = v.read_ts
        store.newest[row] = flat
        new_log.append(flat)
    store.version_log = new_log
    store._cursor = len(new_log)
    store.allocator.reset()
    store._delta_high = 0
    store.delta_origin = np.full(store.allocator.rows, -1, dtype=np.int64)
    for region in store.delta.regions:
        region[:, :] = 0
    bits = np.zeros(store.row_count, dtype=np.uint8)
    for row, v in enumerate(store.newest):
        bits[row] = 0 if v.tombstone else 1
    store._bits_data = bits
    store._bits_delta = np.zeros(store.allocator.rows, dtype=np.uint8)
    store.snapshot_ts = max(store.snapshot_ts, store.last_commit_ts())

    label = strategy
    if strategy == "auto":
        kinds = {pe.strategy for pe in parts}
        if not kinds:
            label = CPU_STRATEGY
        elif len(kinds) > 1:
            label = "hybrid"
        else:
            label = kinds.pop()
    return DefragReport(label, rows_copied, rows_dropped, n, p, total_elapsed, parts)
