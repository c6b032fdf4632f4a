"""Analytical query execution over MVCC stores.

Scans of key columns are offloaded to PIM units in two-phase (LS/compute)
alternation; columns the layout cannot serve device-contiguously (normal
columns) fall back to a CPU scan and are flagged as such in the stats.

The ``ReferenceExecutor`` is the oracle twin: it reconstructs visible rows
by walking version chains (no bitmaps) and evaluates every operator by
brute force (the join is nested-loop). Column values everywhere are the
little-endian integer of the column's first ``min(width, 8)`` bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import QueryError
from .mvcc import SnapshotBitmap, TableStore
from .runtime import (OpType, PimScheduler, execute_aggregation,
                      execute_column_op, execute_join, hash64)

_OPS = {"eq": _kernels.OP_EQ, "ne": _kernels.OP_NE, "lt": _kernels.OP_LT,
        "ge": _kernels.OP_GE, "le": _kernels.OP_LE, "gt": _kernels.OP_GT}


@dataclass(frozen=True)
class Predicate:
    """Comparison on one column; ``between`` means ``lo <= v < hi``."""

    column: str
    op: str
    value: int = 0
    hi: int = 0

    def __post_init__(self):
        if self.op not in _OPS and self.op != "between":
            raise QueryError("unknown predicate op %r" % self.op)

    def evaluate(self, values: np.ndarray) -> np.ndarray:
        v = np.asarray(values, dtype=np.uint64)
        if self.op == "between":
            return (v >= np.uint64(self.value)) & (v < np.uint64(self.hi))
        code = _OPS[self.op]
        ones = np.ones(len(v), dtype=np.uint8)
        return _kernels.filter_mask(v, ones, code, self.value) != 0


@dataclass
class QueryStats:
    snapshot_ts: int = 0
    offloads: list = field(default_factory=list)
    cpu_fallback: bool = False
    messages: int = 0
    started: float = 0.0
    finished: float = 0.0

    def add(self, stats) -> None:
        self.offloads.append(stats)
        self.messages += stats.messages

    @property
    def elapsed(self) -> float:
        return self.finished - self.started


def _column_is_key(store: TableStore, column: str) -> bool:
    spec = store.schema.column(column)
    if not spec.is_key:
        return False
    try:
        store.layout.key_slot(column)
    except Exception:
        return False
    return True


def _cpu_fallback_scan(store: TableStore, column: str, snapshot, memory):
    """Row-wise CPU scan of a column the PIM units cannot stream."""
    parts = {p.part_id for p, _ in store.layout.slots_for_column(column)}
    rows = store.row_count + store.delta_scan_rows
    nbytes = sum(store.layout.parts[pid].footprint_per_row for pid in parts) * rows
    if memory is not None and nbytes:
        memory.cpu_transfer(nbytes, label="cpu-scan:%s" % column)
    return store.visible_scan(column, snapshot)


def run_filter(store: TableStore, predicate: Predicate, snapshot: SnapshotBitmap,
               scheduler: PimScheduler) -> tuple[np.ndarray, QueryStats]:
    """Row mask of visible rows matching the predicate."""
    memory = scheduler.memory
    qs = QueryStats(snapshot_ts=snapshot.snapshot_ts, started=memory.clock.now)
    column = predicate.column
    if _column_is_key(store, column):
        if predicate.op == "between":
            lo = execute_column_op(store, column, OpType.FILTER, snapshot, scheduler,
                                   condition=(_kernels.OP_GE, predicate.value))
            hi = execute_column_op(store, column, OpType.FILTER, snapshot, scheduler,
                                   condition=(_kernels.OP_LT, predicate.hi))
            qs.add(lo.stats)
            qs.add(hi.stats)
            mask = (lo.mask & hi.mask).astype(np.uint8)
            memory.cpu_transfer(len(mask) // 8 + 1, label="merge-masks")
        else:
            res = execute_column_op(store, column, OpType.FILTER, snapshot, scheduler,
                                    condition=(_OPS[predicate.op], predicate.value))
            qs.add(res.stats)
            mask = res.mask
            memory.cpu_transfer(len(mask) // 8 + 1, label="read-mask")
    else:
        qs.cpu_fallback = True
        vis, values = _cpu_fallback_scan(store, column, snapshot, memory)
        mask = ((vis != 0) & predicate.evaluate(values)).astype(np.uint8)
    qs.finished = memory.clock.now
    return mask, qs


def run_group_aggregate(store: TableStore, group_col: str, agg_col: str,
                        snapshot: SnapshotBitmap, scheduler: PimScheduler,
                        row_mask: np.ndarray | None = None
                        ) -> tuple[dict[int, int], QueryStats]:
    """SUM(agg_col) grouped by group_col over visible rows.

    Stage 1 computes per-row group indices near the group column's devices;
    the CPU then moves the index stream to the aggregate column's banks;
    stage 2 sums per group inside each unit; the CPU merges unit partials.
    """
    memory = scheduler.memory
    qs = QueryStats(snapshot_ts=snapshot.snapshot_ts, started=memory.clock.now)
    n = store.row_count
    if _column_is_key(store, group_col):
        grp = execute_column_op(store, group_col, OpType.GROUP, snapshot, scheduler)
        qs.add(grp.stats)
        indices, valid = grp.values, grp.valid
    else:
        qs.cpu_fallback = True
        valid, indices = _cpu_fallback_scan(store, group_col, snapshot, memory)
    if row_mask is not None:
        valid = (valid.astype(np.uint8) & np.asarray(row_mask, dtype=np.uint8))
    # index redistribution: read the group outputs, write them beside agg_col
    memory.cpu_transfer(4 * n, label="read-indices")
    memory.cpu_transfer(4 * n, label="write-indices")
    if _column_is_key(store, agg_col):
        agg = execute_aggregation(store, agg_col, indices, valid, snapshot, scheduler)
        qs.add(agg.stats)
        merged: dict[int, int] = {}
        total_partial_bytes = 0
        for uniq, sums in agg.partials.values():
            total_partial_bytes += len(uniq) * 12
            for g, s in zip(uniq.tolist(), sums.tolist()):
                merged[g] = merged.get(g, 0) + s
        memory.cpu_transfer(max(total_partial_bytes, 1), label="merge-partials")
    else:
        qs.cpu_fallback = True
        avis, avals = _cpu_fallback_scan(store, agg_col, snapshot, memory)
        use = (valid != 0) & (avis != 0)
        merged = {}
        for g, s in zip(indices[use].tolist(), avals[use].tolist()):
            merged[g] = merged.get(g, 0) + s
    qs.finished = memory.clock.now
    return merged, qs


def run_filtered_sum(store: TableStore, predicate: Predicate, agg_col: str,
                     snapshot: SnapshotBitmap, scheduler: PimScheduler
                     ) -> tuple[int, QueryStats]:
    """SUM(agg_col) over visible rows matching the predicate."""
    memory = scheduler.memory
    mask, fstats = run_filter(store, predicate, snapshot, scheduler)
    qs = QueryStats(snapshot_ts=snapshot.snapshot_ts, started=fstats.started,
                    cpu_fallback=fstats.cpu_fallback)
    for o in fstats.offloads:
        qs.add(o)
    n = store.row_count
    if _column_is_key(store, agg_col):
        indices = np.zeros(n, dtype=np.int64)
        memory.cpu_transfer(4 * n, label="write-indices")
        agg = execute_aggregation(store, agg_col, indices, mask, snapshot, scheduler)
        qs.add(agg.stats)
        total = 0
        partial_bytes = 0
        for uniq, sums in agg.partials.values():
            partial_bytes += len(uniq) * 12
            total += int(sums.sum())
        memory.cpu_transfer(max(partial_bytes, 1), label="merge-partials")
    else:
        qs.cpu_fallback = True
        avis, avals = _cpu_fallback_scan(store, agg_col, snapshot, memory)
        use = (mask != 0) & (avis != 0)
        total = int(avals[use].sum())
    qs.finished = memory.clock.now
    return total, qs


def run_hash_join(store_a: TableStore, col_a: str, snap_a: SnapshotBitmap,
                  store_b: TableStore, col_b: str, snap_b: SnapshotBitmap,
                  scheduler: PimScheduler,
                  mask_a: np.ndarray | None = None,
                  mask_b: np.ndarray | None = None,
                  hash_seed: int = 0) -> tuple[list[tuple[int, int]], QueryStats]:
    """Equi-join row pairs (row_a, row_b) where the column values match.

    Hash ops run near the data; the CPU routes (value, row) pairs into
    per-unit buckets by hash; Join verifies actual values inside WRAM, so
    hash collisions cannot produce false matches.
    """
    memory = scheduler.memory
    qs = QueryStats(snapshot_ts=snap_a.snapshot_ts, started=memory.clock.now)
    sides = []
    for store, col, snap, mask in ((store_a, col_a, snap_a, mask_a),
                                   (store_b, col_b, snap_b, mask_b)):
        if _column_is_key(store, col):
            res = execute_column_op(store, col, OpType.HASH, snapshot=snap,
                                    scheduler=scheduler, hash_seed=hash_seed)
            qs.add(res.stats)
            valid, hashes = res.valid, res.values
            _, values = store.visible_scan(col, snap)
        else:
            qs.cpu_fallback = True
            valid, values = _cpu_fallback_scan(store, col, snap, memory)
            hashes = hash64(values, hash_seed)
        if mask is not None:
            valid = valid.astype(np.uint8) & np.asarray(mask, dtype=np.uint8)
        memory.cpu_transfer(8 * store.row_count, label="read-hashes")
        sides.append((store, valid, values, hashes))
    part = store_a.layout.key_slot(col_a)[0] if _column_is_key(store_a, col_a) \
        else store_a.layout.parts[0]
    g = memory.geometry
    units = [scheduler.unit(part.channel, part.rank, dev, bank)
             for dev in range(g.devices_per_rank)
             for bank in range(g.banks_per_device)]
    value_bytes = max(min(store_a.schema.column(col_a).width, 8),
                      min(store_b.schema.column(col_b).width, 8))
    buckets = []
    for store, valid, values, hashes in sides:
        rows = np.nonzero(valid)[0]
        hs = hashes[rows]
        which = (hs % np.uint64(len(units))).astype(np.int64)
        side: dict = {}
        for i, unit in enumerate(units):
            sel = which == i
            if sel.any():
                side[unit] = (values[rows[sel]], rows[sel].astype(np.int64))
        payload = len(rows) * (value_bytes + 8)
        memory.cpu_transfer(max(payload, 1), label="scatter-buckets")
        buckets.append(side)
    matches, jstats = execute_join(buckets[0], buckets[1], value_bytes, scheduler)
    qs.add(jstats)
    memory.cpu_transfer(max(len(matches), 1) * 16, label="read-matches")
    qs.finished = memory.clock.now
    return sorted(matches), qs


# --- multi-stage plans ---


@dataclass
class QueryStage:
    name: str
    kind: str
    stats: QueryStats


@dataclass
class QueryPlan:
    query_id: str
    snapshot_ts: int
    stages: list[QueryStage] = field(default_factory=list)

    def add(self, name: str, kind: str, stats: QueryStats) -> "QueryPlan":
        if stats.snapshot_ts != self.snapshot_ts:
            raise QueryError("stage %r ran against snapshot %d, plan uses %d"
                             % (name, stats.snapshot_ts, self.snapshot_ts))
        self.stages.append(QueryStage(name, kind, stats))
        return self

    @property
    def offloads(self) -> list:
        return [o for st in self.stages for o in st.stats.offloads]

    @property
    def messages(self) -> int:
        return sum(st.stats.messages for st in self.stages)

    @property
    def elapsed(self) -> float:
        if not self.stages:
            return 0.0
        return self.stages[-1].stats.finished - self.stages[0].stats.started


def run_filter_join_aggregate(store_a: TableStore, filter_pred: Predicate,
                              join_col_a: str, store_b: TableStore, join_col_b: str,
                              group_col_a: str, agg_col_b: str,
                              scheduler: PimScheduler, at_ts: int | None = None
                              ) -> tuple[dict[int, int], QueryPlan]:
    """Three-stage plan: filter A, join A with B, SUM(B.agg) per A.group.

    All stages run against one snapshot timestamp taken up front.
    """
    if at_ts is None:
        at_ts = max(store_a.last_commit_ts(), store_b.last_commit_ts())
    snap_a = store_a.build_snapshot(at_ts)
    snap_b = store_b.build_snapshot(at_ts)
    plan = QueryPlan("filter-join-aggregate", at_ts)
    mask_a, fstats = run_filter(store_a, filter_pred, snap_a, scheduler)
    plan.add("filter:%s" % filter_pred.column, "filter", fstats)
    pairs, jstats = run_hash_join(store_a, join_col_a, snap_a,
                                  store_b, join_col_b, snap_b,
                                  scheduler, mask_a=mask_a)
    plan.add("join:%s=%s" % (join_col_a, join_col_b), "join", jstats)
    memory = scheduler.memory
    qs = QueryStats(snapshot_ts=at_ts, started=memory.clock.now)
    _, gvals = store_a.visible_scan(group_col_a, snap_a)
    _, avals = store_b.visible_scan(agg_col_b, snap_b)
    memory.cpu_transfer(max(len(pairs), 1) * 16, label="gather-pair-columns")
    result: dict[int, int] = {}
    for ra, rb in pairs:
        gkey = int(gvals[ra])
        result[gkey] = result.get(gkey, 0) + int(avals[rb])
    qs.finished = memory.clock.now
    plan.add("aggregate:%s" % group_col_a, "aggregation", qs)
    return result, plan


# --- reference executor (oracle) ---


class ReferenceExecutor:
    """Brute-force twin used to check results, bypassing snapshots entirely.

    Visibility is re-derived per row by walking the version chain; values
    are decoded from gathered whole-row images.
    """

    def __init__(self, stores: dict[str, TableStore]):
        self.stores = dict(stores)

    def visible_rows(self, table: str, at_ts: int) -> dict[int, np.ndarray]:
        store = self.stores[table]
        out = {}
        for row in range(store.row_count):
            v = store.newest[row]
            while v is not None and v.write_ts > at_ts:
                v = v.prev
            if v is None or v.tombstone:
                continue
            region = store.data if v.region == 0 else store.delta
            out[row] = region.read_row(v.pos)
        return out

    def visible_version_positions(self, table: str, at_ts: int):
        """row -> (region, pos) of the visible version; used to audit bitmaps."""
        store = self.stores[table]
        out = {}
        for row in range(store.row_count):
            v = store.newest[row]
            while v is not None and v.write_ts > at_ts:
                v = v.prev
            if v is None or v.tombstone:
                continue
            out[row] = (v.region, v.pos)
        return out

    def _value(self, store: TableStore, image: np.ndarray, column: str) -> int:
        off = store.schema.column_offset(column)
        w = min(store.schema.column(column).width, 8)
        return int.from_bytes(bytes(image[off:off + w]), "little")

    def filter(self, table: str, predicate: Predicate, at_ts: int) -> list[int]:
        store = self.stores[table]
        hits = []
        for row, image in self.visible_rows(table, at_ts).items():
            v = self._value(store, image, predicate.column)
            if predicate.op == "between":
                ok = predicate.value <= v < predicate.hi
            else:
                ok = {"eq": v == predicate.value, "ne": v != predicate.value,
                      "lt": v < predicate.value, "ge": v >= predicate.value,
                      "le": v <= predicate.value, "gt": v > predicate.value}[predicate.op]
            if ok:
                hits.append(row)
        return sorted(hits)

    def group_sum(self, table: str, group_col: str, agg_col: str, at_ts: int,
                  rows: list[int] | None = None) -> dict[int, int]:
        store = self.stores[table]
        visible = self.visible_rows(table, at_ts)
        out: dict[int, int] = {}
        for row, image in visible.items():
            if rows is not None and row not in rows:
                continue
            g = self._value(store, image, group_col)
            out[g] = out.get(g, 0) + self._value(store, image, agg_col)
        return out

    def hash_join(self, table_a: str, col_a: str, table_b: str, col_b: str,
                  at_ts: int, rows_a: list[int] | None = None,
                  rows_b: list[int] | None = None) -> list[tuple[int, int]]:
        sa, sb = self.stores[table_a], self.stores[table_b]
        va = {r: self._value(sa, img, col_a)
              for r, img in self.visible_rows(table_a, at_ts).items()
              if rows_a is None or r in rows_a}
        vb = {r: self._value(sb, img, col_b)
              for r, img in self.visible_rows(table_b, at_ts).items()
              if rows_b is None or r in rows_b}
        pairs = []
        for ra, x in va.items():
            for rb, y in vb.items():
                if x == y:
                    pairs.append((ra, rb))
        return sorted(pairs)

    def filter_join_aggregate(self, table_a: str, pred: Predicate, col_a: str,
                              table_b: str, col_b: str, group_col_a: str,
                              agg_col_b: str, at_ts: int) -> dict[int, int]:
        sa, sb = self.stores[table_a], self.stores[table_b]
        keep = set(self.filter(table_a, pred, at_ts))
        pairs = self.hash_join(table_a, col_a, table_b, col_b, at_ts, rows_a=keep)
        imgs_a = self.visible_rows(table_a, at_ts)
        imgs_b = self.visible_rows(table_b, at_ts)
        out: dict[int, int] = {}
        for ra, rb in pairs:
            g = self._value(sa, imgs_a[ra], group_col_a)
            out[g] = out.get(g, 0) + self._value(sb, imgs_b[rb], agg_col_b)
        return out
