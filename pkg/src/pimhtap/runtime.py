"""PIM offload protocol: launch requests, scheduling, two-phase execution.

The CPU drives a PIM unit by writing a 64-byte request (1 opcode byte + 63
parameter bytes, little-endian, zero padding) to a special physical address,
then polling for completion, so every offload costs exactly two control
messages however many units it fans out to. Only LS (load/store) and
Defragment requests touch DRAM and therefore need bank control handed over;
the compute requests run entirely out of WRAM while the CPU keeps the banks.

A column operation runs as strictly alternating LS and compute phases:
LS(load c1), compute(c1), LS(store r1, load c2), compute(c2), ..., ending
with a final LS that stores the last results. The CPU is blocked on the
operand banks only inside LS phases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import _kernels
from .errors import ProtocolError
from .geometry import Geometry
from .layout import bank_of_block
from .memory import MemorySystem
from .mvcc import TableStore

REQUEST_SIZE = 64
DEFAULT_SPECIAL_ADDRESS = (1 << 40) - REQUEST_SIZE  # top of the address space


class OpType(IntEnum):
    LS = 1
    DEFRAGMENT = 2
    FILTER = 3
    GROUP = 4
    HASH = 5
    JOIN = 6
    AGGREGATION = 7


# (field name, byte width) per opcode;3 B fields are DRAM addresses,
# 2 B fields WRAM offsets / strides / lengths, 1 B the scanned value width.
FIELD_LAYOUT: dict[OpType, tuple[tuple[str, int], ...]] = {
    OpType.LS: (
        ("result_addr", 3), ("result_len", 2), ("result_offset", 2), ("result_stride", 2),
        ("op0_addr", 3), ("op0_len", 2), ("op0_offset", 2), ("op0_stride", 2),
    ),
    OpType.DEFRAGMENT: (
        ("meta_addr", 3), ("data_addr", 3), ("data_stride", 2),
        ("delta_addr", 3), ("delta_stride", 2),
    ),
    OpType.FILTER: (
        ("bitmap_offset", 2), ("data_offset", 2), ("result_offset", 2),
        ("data_width", 1), ("condition", 8),
    ),
    OpType.GROUP: (
        ("bitmap_offset", 2), ("data_offset", 2), ("result_offset", 2), ("data_width", 1),
    ),
    OpType.HASH: (
        ("bitmap_offset", 2), ("data_offset", 2), ("result_offset", 2), ("data_width", 1),
    ),
    OpType.JOIN: (
        ("hash1_offset", 2), ("hash2_offset", 2), ("result_offset", 2), ("data_width", 1),
    ),
    OpType.AGGREGATION: (
        ("bitmap_offset", 2), ("data_offset", 2), ("result_offset", 2),
        ("data_width", 1), ("index_offset", 2),
    ),
}

HANDOVER_OPS = (OpType.LS, OpType.DEFRAGMENT)


@dataclass(frozen=True)
class LaunchRequest:
    op_type: OpType
    fields: tuple[tuple[str, int], ...]

    @classmethod
    def make(cls, op_type: OpType, **fields) -> "LaunchRequest":
        spec = FIELD_LAYOUT[OpType(op_type)]
        names = [n for n, _ in spec]
        unknown = set(fields) - set(names)
        if unknown:
            raise ProtocolError("op %s has no field(s) %s"
                                % (OpType(op_type).name, sorted(unknown)))
        vals = []
        for name, size in spec:
            v = int(fields.get(name, 0))
            if not (0 <= v < 1 << (8 * size)):
                raise ProtocolError("field %s=%d does not fit %d byte(s)"
                                    % (name, v, size))
            vals.append((name, v))
        return cls(OpType(op_type), tuple(vals))

    def __getitem__(self, name: str) -> int:
        for n, v in self.fields:
            if n == name:
                return v
        raise KeyError(name)

    @property
    def needs_handover(self) -> bool:
        return self.op_type in HANDOVER_OPS

    def encode(self) -> bytes:
        buf = bytearray(REQUEST_SIZE)
        buf[0] = int(self.op_type)
        pos = 1
        for (name, size), (_, v) in zip(FIELD_LAYOUT[self.op_type], self.fields):
            buf[pos:pos + size] = int(v).to_bytes(size, "little")
            pos += size
        return bytes(buf)


def decode_request(raw: bytes) -> LaunchRequest:
    if len(raw) != REQUEST_SIZE:
        raise ProtocolError("launch request must be exactly %d bytes" % REQUEST_SIZE)
    try:
        op = OpType(raw[0])
    except ValueError:
        raise ProtocolError("unknown opcode 0x%02x" % raw[0]) from None
    pos = 1
    vals = []
    for name, size in FIELD_LAYOUT[op]:
        vals.append((name, int.from_bytes(raw[pos:pos + size], "little")))
        pos += size
    if any(raw[pos:]):
        raise ProtocolError("nonzero padding in launch request")
    return LaunchRequest(op, tuple(vals))


# --- units and scheduling ---


# eq=False: units are interned per scheduler, identity hashing lets them key dicts
@dataclass(eq=False)
class PimUnitState:
    channel: int
    rank: int
    device: int
    bank: int
    busy_until: float = 0.0
    wram_used: int = 0
    launches: int = 0

    @property
    def key(self):
        return (self.channel, self.rank, self.device, self.bank)

    @property
    def bank_key(self):
        return (self.channel, self.rank, self.bank)


class PimScheduler:
    """Dispatch and completion tracking for launch requests."""

    def __init__(self, memory: MemorySystem,
                 special_address: int = DEFAULT_SPECIAL_ADDRESS):
        self.memory = memory
        self.special_address = special_address
        self.units: dict[tuple, PimUnitState] = {}
        self.requests: list[LaunchRequest] = []
        self.launches = 0
        self.polls = 0

    def unit(self, channel, rank, device, bank) -> PimUnitState:
        key = (channel, rank, device, bank)
        u = self.units.get(key)
        if u is None:
            g = self.memory.geometry
            if not (0 <= device < g.devices_per_rank and 0 <= bank < g.banks_per_device):
                raise ProtocolError("unit %s outside the geometry" % (key,))
            u = self.units[key] = PimUnitState(channel, rank, device, bank)
        return u

    def dispatch(self, request: LaunchRequest, units, at: float | None = None) -> float:
        """Write the request; returns the time the units accept it.

        A busy unit queues the request behind its current work.
        """
        at = self.memory.clock.now if at is None else at
        _, ack = self.memory.cpu_message(at, "launch:%s" % request.op_type.name)
        start = ack
        for u in units:
            start = max(start, u.busy_until)
        self.requests.append(request)
        self.launches += 1
        for u in units:
            u.launches += 1
        return start

    def poll(self, units, at: float | None = None) -> str:
        """One polling read; 'done' once every unit has finished."""
        at = self.memory.clock.now if at is None else at
        _, end = self.memory.cpu_message(at, "poll")
        self.polls += 1
        return "done" if all(u.busy_until <= end for u in units) else "pending"


def scheduler_dispatch(scheduler: PimScheduler, request: LaunchRequest, units,
                       at: float | None = None) -> float:
    return scheduler.dispatch(request, units, at)


# --- two-phase execution ---


@dataclass
class Chunk:
    region: int          # 0 data, 1 delta, 2 scratch operands
    block: int
    rows: int
    load_bytes: int
    store_bytes: int
    base_addr: int = 0


@dataclass
class OffloadStats:
    op_name: str
    phases: int = 0
    ls_launches: int = 0
    compute_launches: int = 0
    messages: int = 0
    handover_ranks: int = 0
    started: float = 0.0
    finished: float = 0.0
    load_time: float = 0.0
    compute_time: float = 0.0
    blocked: list[tuple[float, float]] = field(default_factory=list)
    compute_windows: list[tuple[float, float]] = field(default_factory=list)
    unit_chunks: dict = field(default_factory=dict)
    device_chunks: dict = field(default_factory=dict)

    @property
    def elapsed(self) -> float:
        return self.finished - self.started

    @property
    def blocked_time(self) -> float:
        return sum(e - s for s, e in self.blocked)


def run_two_phase(scheduler: PimScheduler, op_type: OpType, unit_chunks,
                  compute_request: LaunchRequest,
                  data_width: int = 0) -> OffloadStats:
    """Sequence LS/compute alternation over per-unit chunk queues."""
    memory = scheduler.memory
    g = memory.geometry
    stats = OffloadStats(op_name=op_type.name)
    stats.started = memory.clock.now
    queues = {unit: list(chunks) for unit, chunks in unit_chunks.items() if chunks}
    for unit, chunks in queues.items():
        stats.unit_chunks[unit.key] = len(chunks)
        dev = unit.device
        stats.device_chunks[dev] = stats.device_chunks.get(dev, 0) + len(chunks)
    pending_store: dict = {}
    banks = sorted({u.bank_key for u in queues})
    units = sorted(queues, key=lambda u: u.key)
    in_flight: dict = {}
    while queues or pending_store:
        # LS phase: store previous results, load next chunks
        loads = {}
        for u in units:
            q = queues.get(u)
            if q:
                loads[u] = q.pop(0)
                if not q:
                    del queues[u]
        example = next(iter(loads.values())) if loads else None
        ls = LaunchRequest.make(
            OpType.LS,
            result_addr=0, result_len=max(pending_store.values(), default=0) & 0xFFFF,
            op0_addr=(example.base_addr & 0xFFFFFF) if example else 0,
            op0_len=(example.load_bytes & 0xFFFF) if example else 0,
            op0_offset=0,
            op0_stride=(data_width & 0xFFFF),
        )
        t0 = scheduler.dispatch(ls, units)
        _, t1 = memory.handover([list(b) for b in banks], "pim", at=t0)
        per_unit = []
        total_bytes = 0
        for u in units:
            b = pending_store.pop(u, 0)
            if u in loads:
                b += loads[u].load_bytes
            per_unit.append(b)
            total_bytes += b
        _, t2 = memory.pim_access(per_unit, useful_bytes=0, banks=[], at=t1,
                                  label="ls:%s" % op_type.name)
        _, t3 = memory.handover([list(b) for b in banks], "cpu", at=t2)
        scheduler.poll(units, at=t3)
        for u in units:
            u.busy_until = t3
        stats.phases += 1
        stats.ls_launches += 1
        stats.messages += 2
        stats.handover_ranks += 2 * len({(c, r) for c, r, _ in banks})
        stats.blocked.append((t0, t3))
        stats.load_time += t3 - t0
        if not loads:
            break
        # compute phase: WRAM only, banks stay with the CPU
        c0 = memory.clock.now
        dur = max(c.rows for c in loads.values()) / g.compute_rate
        memory.bill("pim", dur, label="compute:%s" % op_type.name)
        c1 = c0 + dur
        scheduler.dispatch(compute_request, units, at=c0)
        scheduler.poll(units, at=c1)
        for u, c in loads.items():
            u.busy_until = c1
            u.wram_used = min(c.load_bytes, g.wram_data_budget)
            pending_store[u] = c.store_bytes
        pending_store = {u: b for u, b in pending_store.items() if b}
        stats.compute_launches += 1
        stats.messages += 2
        stats.compute_windows.append((c0, c1))
        stats.compute_time += dur
        if not queues and not pending_store:
            # final LS still owed: results of this compute are zero bytes
            break
    stats.finished = memory.clock.now
    return stats


# --- column operations over a store ---


SPLITMIX_SEED = 0x9E3779B97F4A7C15


def hash64(values, seed: int = 0) -> np.ndarray:
    """splitmix64 finalizer over unsigned values (vectorized)."""
    z = np.asarray(values, dtype=np.uint64) + np.uint64(seed * 2 + SPLITMIX_SEED)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@dataclass
class ColumnOpResult:
    stats: OffloadStats
    mask: np.ndarray | None = None       # FILTER: visibility & predicate, per row
    values: np.ndarray | None = None     # GROUP/HASH: per-row outputs
    valid: np.ndarray | None = None      # rows where values are meaningful
    partials: dict | None = None         # AGGREGATION: unit -> (indices, sums)


def _scan_chunk_plan(store: TableStore, column: str, geometry: Geometry,
                     scheduler: PimScheduler, extra_load_per_row: float = 0.0,
                     store_bytes_per_row: float = 0.0,
                     store_at_end_per_unit: int = 0):
    """Assign data+delta blocks of a key column to units and cut WRAM chunks."""
    part, slot = store.layout.key_slot(column)
    B = store.layout.block_size
    budget = geometry.wram_data_budget
    if slot.width == part.row_width:
        col_bytes_per_row = slot.width
    else:
        col_bytes_per_row = geometry.interleave_granularity * math.ceil(
            slot.width / geometry.interleave_granularity)
    per_row = col_bytes_per_row + 0.125 + extra_load_per_row
    budget_rows = max(1, int((budget - 64) // per_row))
    plan: dict[PimUnitState, list[Chunk]] = {}
    for region_code, region_rows in ((0, store.row_count), (1, store.delta_scan_rows)):
        blocks = math.ceil(region_rows / B)
        for b in range(blocks):
            rows = min(B, region_rows - b * B)
            dev = (slot.device + b) % part.devices
            bank = bank_of_block(store.layout, b)
            unit = scheduler.unit(part.channel, part.rank, dev, bank)
            q = plan.setdefault(unit, [])
            done = 0
            while done < rows:
                take = min(budget_rows, rows - done)
                load = math.ceil(take * col_bytes_per_row) + math.ceil(take / 8)
                load += math.ceil(take * extra_load_per_row)
                q.append(Chunk(region_code, b, take, load,
                               math.ceil(take * store_bytes_per_row),
                               base_addr=(b * B + done) * part.row_width + slot.offset))
                done += take
    if store_at_end_per_unit:
        for q in plan.values():
            if q:
                q[-1].store_bytes += store_at_end_per_unit
    return part, slot, plan


def _visible_column(store: TableStore, column: str, snapshot):
    """(mask, values) per logical row: the semantic result of a scan."""
    return store.visible_scan(column, snapshot)


def execute_column_op(store: TableStore, column: str, op_type: OpType,
                      snapshot, scheduler: PimScheduler,
                      condition: tuple[int, int] | None = None,
                      hash_seed: int = 0) -> ColumnOpResult:
    """Run FILTER, GROUP, or HASH over one key column with PIM offload.

    The semantic result is computed exactly (same bytes the units would
    see); the offload machinery bills time, messages, and handovers.
    """
    op_type = OpType(op_type)
    geometry = scheduler.memory.geometry
    spec = store.schema.column(column)
    width = min(spec.width, 8)
    if op_type == OpType.FILTER:
        if condition is None:
            raise ProtocolError("FILTER needs a condition")
        if not (0 <= int(condition[1]) < 1 << 56):
            raise ProtocolError("filter operand must fit 56 bits")
        store_per_row = 1 / 8
        request = LaunchRequest.make(
            op_type, bitmap_offset=0, data_offset=0,
            result_offset=geometry.wram_data_budget & 0xFFFF, data_width=width,
            condition=(int(condition[0]) | (int(condition[1]) << 8)) & (2**64 - 1))
    elif op_type == OpType.GROUP:
        store_per_row = 4
        request = LaunchRequest.make(op_type, bitmap_offset=0, data_offset=0,
                                     result_offset=geometry.wram_data_budget & 0xFFFF,
                                     data_width=width)
    elif op_type == OpType.HASH:
        store_per_row = 8
        request = LaunchRequest.make(op_type, bitmap_offset=0, data_offset=0,
                                     result_offset=geometry.wram_data_budget & 0xFFFF,
                                     data_width=width)
    else:
        raise ProtocolError("execute_column_op supports FILTER, GROUP, HASH")
    part, slot, plan = _scan_chunk_plan(store, column, geometry, scheduler,
                                        store_bytes_per_row=store_per_row)
    stats = run_two_phase(scheduler, op_type, plan, request, data_width=width)
    mask, values = _visible_column(store, column, snapshot)
    if op_type == OpType.FILTER:
        op_code, operand = condition
        out = _kernels.filter_mask(values, mask, op_code, operand)
        return ColumnOpResult(stats, mask=out)
    if op_type == OpType.GROUP:
        return ColumnOpResult(stats, values=values.copy(), valid=mask.copy())
    hashed = hash64(values, hash_seed)
    return ColumnOpResult(stats, values=hashed, valid=mask.copy())


def execute_aggregation(store: TableStore, column: str, indices: np.ndarray,
                        index_valid: np.ndarray, snapshot,
                        scheduler: PimScheduler) -> ColumnOpResult:
    """SUM the column per group index; returns per-unit partial sums.

    ``indices`` assigns each logical row a group; the CPU has already
    transferred them into each unit's bank, so the units load 4 B per row on
    top of the column bytes and the bitmap slice.
    """
    geometry = scheduler.memory.geometry
    spec = store.schema.column(column)
    width = min(spec.width, 8)
    request = LaunchRequest.make(OpType.AGGREGATION, bitmap_offset=0, data_offset=0,
                                 result_offset=geometry.wram_data_budget & 0xFFFF,
                                 data_width=width, index_offset=4)
    part, slot, plan = _scan_chunk_plan(store, column, geometry, scheduler,
                                        extra_load_per_row=4.0,
                                        store_at_end_per_unit=1)
    mask, values = _visible_column(store, column, snapshot)
    use = (mask != 0) & (index_valid != 0)
    # split rows by owning unit so the partial merge step has real fan-in
    B = store.layout.block_size
    partials: dict = {}
    store_bytes: dict = {}
    rows = np.nonzero(use)[0]
    if len(rows):
        blocks = rows // B
        devs = (slot.device + blocks) % part.devices
        banks = (blocks // part.devices) % store.layout.banks_per_device
        idx = indices[rows]
        val = values[rows]
        unit_ids = devs * store.layout.banks_per_device + banks
        order = np.argsort(unit_ids, kind="stable")
        unit_ids, idx, val = unit_ids[order], idx[order], val[order]
        bounds = np.nonzero(np.diff(unit_ids))[0] + 1
        for seg_ids, seg_idx, seg_val in zip(
                np.split(unit_ids, bounds), np.split(idx, bounds), np.split(val, bounds)):
            dev = int(seg_ids[0]) // store.layout.banks_per_device
            bank = int(seg_ids[0]) % store.layout.banks_per_device
            unit = scheduler.unit(part.channel, part.rank, dev, bank)
            uniq, inv = np.unique(seg_idx, return_inverse=True)
            sums = np.zeros(len(uniq), dtype=np.uint64)
            np.add.at(sums, inv, seg_val)
            partials[unit.key] = (uniq, sums)
            store_bytes[unit] = len(uniq) * 12
    for unit, q in plan.items():
        if q:
            q[-1].store_bytes = store_bytes.get(unit, 0)
    stats = run_two_phase(scheduler, OpType.AGGREGATION, plan, request, data_width=width)
    return ColumnOpResult(stats, partials=partials)


def execute_join(buckets_a, buckets_b, value_bytes: int,
                 scheduler: PimScheduler) -> tuple[list, OffloadStats]:
    """Bucketized equi-join inside WRAM.

    ``buckets_a``/``buckets_b`` map a unit to ``(values, row_ids)`` arrays
    already partitioned by hash; each unit builds a table over its A bucket
    and probes with its B bucket. Returns matched (row_a, row_b) pairs and
    the offload stats. Oversized buckets are processed in sub-rounds.
    """
    geometry = scheduler.memory.geometry
    budget = geometry.wram_data_budget
    request = LaunchRequest.make(OpType.JOIN, hash1_offset=0,
                                 hash2_offset=budget // 2 & 0xFFFF,
                                 result_offset=geometry.wram_data_budget & 0xFFFF,
                                 data_width=min(value_bytes, 255))
    pair_bytes = value_bytes + 8
    plan: dict = {}
    matches: list = []
    units = sorted(set(buckets_a) | set(buckets_b), key=lambda u: u.key)
    for unit in units:
        va, ra = buckets_a.get(unit, (np.zeros(0, np.uint64), np.zeros(0, np.int64)))
        vb, rb = buckets_b.get(unit, (np.zeros(0, np.uint64), np.zeros(0, np.int64)))
        # semantic join on actual values (hash routed, value verified)
        if len(va) and len(vb):
            table: dict = {}
            for v, r in zip(va.tolist(), ra.tolist()):
                table.setdefault(v, []).append(r)
            for v, r in zip(vb.tolist(), rb.tolist()):
                for ra_hit in table.get(v, ()):
                    matches.append((ra_hit, r))
        a_bytes = len(va) * pair_bytes
        b_bytes = len(vb) * pair_bytes
        half = max(budget // 2, pair_bytes)
        rounds = max(math.ceil(a_bytes / half) if a_bytes else 0,
                     math.ceil(b_bytes / half) if b_bytes else 0)
        q = []
        done_a = done_b = 0
        for k in range(rounds):
            take_a = min(len(va) - done_a, half // pair_bytes)
            take_b = min(len(vb) - done_b, half // pair_bytes)
            load = (take_a + take_b) * pair_bytes
            est_out = min(take_a, take_b) * 16 if take_a and take_b else 0
            q.append(Chunk(2, k, max(take_a + take_b, 1), load, est_out))
            done_a += take_a
            done_b += take_b
        if q:
            plan[unit] = q
    stats = run_two_phase(scheduler, OpType.JOIN, plan, request,
                          data_width=min(value_bytes, 255))
    return matches, stats
