"""Multi-version store over the unified layout.

Row versions live in two placed regions sharing one layout: the *data*
region holds each row's original (oldest) version at its logical row index;
committed updates append new versions to the *delta* region. Version
metadata (timestamps, chain pointers, placement) stays in CPU memory.

A delta block only accepts rows whose origin block has the same rotation
class, so a delta version of a row lands on the same device as the origin
version and a PIM unit can scan data and delta slices of its device without
cross-device traffic. Rotation class of block ``b`` is ``b % d`` in both
regions; the allocator picks a delta block of the right class.

Analytical reads use snapshot bitmaps: one bit per data row plus one per
delta slot, exactly one bit set along any row's version chain. Snapshots
advance incrementally: building a snapshot at ``at_ts`` replays only the
versions committed since the previous snapshot, clearing the superseded
bit and setting the new one, and skipping versions newer than ``at_ts``.
"""

from __future__ import annotations

import base64
import itertools
import json
import math
import weakref
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConflictError, TransactionError
from .layout import PlacedTable, TableLayout, _row_lines
from .memory import MemorySystem

DATA, DELTA, TOMBSTONE = 0, 1, 2
_REGION_NAMES = {DATA: "data", DELTA: "delta", TOMBSTONE: "tombstone"}
# billable size of one VersionMeta when the CPU replays the commit log
VERSION_META_BYTES = 16


class VersionMeta:
    """One version of one logical row."""

    __slots__ = ("version_id", "row", "region", "pos", "write_ts", "read_ts", "prev")

    def __init__(self, version_id, row, region, pos, write_ts, prev=None):
        self.version_id = version_id
        self.row = row
        self.region = region
        self.pos = pos
        self.write_ts = write_ts
        self.read_ts = write_ts
        self.prev = prev

    @property
    def tombstone(self) -> bool:
        return self.region == TOMBSTONE

    def __repr__(self):
        return "<v%d row=%d %s:%d ts=%d>" % (
            self.version_id, self.row, _REGION_NAMES[self.region], self.pos, self.write_ts)


@dataclass(frozen=True)
class SnapshotBitmap:
    """Frozen visibility bitmap pair (one byte per row models one bit)."""

    snapshot_ts: int
    data_bits: np.ndarray
    delta_bits: np.ndarray
    replication: int

    @property
    def storage_bits(self) -> int:
        """Bits the snapshot occupies in DRAM, all device copies counted."""
        return (len(self.data_bits) + len(self.delta_bits)) * self.replication


class DeltaAllocator:
    """Free delta slots grouped by rotation class (block index mod d)."""

    def __init__(self, devices: int, block_size: int):
        self.devices = devices
        self.block_size = block_size
        self.blocks = 0
        self.free: list[deque] = [deque() for _ in range(devices)]

    def _add_block(self) -> None:
        b = self.blocks
        self.blocks += 1
        lo = b * self.block_size
        self.free[b % self.devices].extend(range(lo, lo + self.block_size))

    def grow_blocks(self, n: int) -> None:
        for _ in range(n):
            self._add_block()

    def alloc(self, rotation_class: int) -> int:
        while not self.free[rotation_class]:
            self._add_block()
        return self.free[rotation_class].popleft()

    @property
    def rows(self) -> int:
        return self.blocks * self.block_size

    def reset(self) -> None:
        blocks = self.blocks
        self.blocks = 0
        self.free = [deque() for _ in range(self.devices)]
        self.grow_blocks(blocks)


class Transaction:
    def __init__(self, store: "TableStore", start_ts: int):
        self.store = store
        self.start_ts = start_ts
        self.state = "active"
        self.writes: dict[int, np.ndarray | None] = {}
        self.inserts: list[np.ndarray] = []

    def _check_active(self):
        if self.state != "active":
            raise TransactionError("transaction is %s" % self.state)

    def read(self, row: int) -> np.ndarray | None:
        """Row image as of the transaction's start, own writes first."""
        self._check_active()
        if row in self.writes:
            img = self.writes[row]
            return None if img is None else img.copy()
        return self.store.read_version(row, self.start_ts)

    def update(self, row: int, image) -> None:
        self._check_active()
        if self.read(row) is None:
            raise TransactionError("row %d is not visible to this transaction" % row)
        img = np.asarray(image, dtype=np.uint8)
        if img.shape != (self.store.row_bytes,):
            raise TransactionError("row image must be %d bytes" % self.store.row_bytes)
        self.writes[row] = img.copy()

    def delete(self, row: int) -> None:
        self._check_active()
        if self.read(row) is None:
            raise TransactionError("row %d is not visible to this transaction" % row)
        self.writes[row] = None

    def insert(self, image) -> None:
        self._check_active()
        img = np.asarray(image, dtype=np.uint8)
        if img.shape != (self.store.row_bytes,):
            raise TransactionError("row image must be %d bytes" % self.store.row_bytes)
        self.inserts.append(img.copy())

    def commit(self) -> int:
        self._check_active()
        try:
            ts = self.store._commit(self)
        except ConflictError:
            self.state = "aborted"
            raise
        self.state = "committed"
        return ts

    def abort(self) -> None:
        self._check_active()
        self.state = "aborted"


class TableStore:
    """MVCC store for one table: placed regions + version metadata."""

    def __init__(self, layout: TableLayout, memory: MemorySystem | None = None,
                 ts_counter=None, initial_delta_fraction: float = 0.125):
        self.layout = layout
        self.memory = memory
        self.ts = ts_counter if ts_counter is not None else itertools.count(1)
        self.data = PlacedTable(layout)
        self.delta = PlacedTable(layout)
        d = layout.parts[0].devices if layout.parts else 1
        self.allocator = DeltaAllocator(d, layout.block_size)
        self.initial_delta_fraction = initial_delta_fraction
        self.delta_origin = np.full(0, -1, dtype=np.int64)
        self.newest: list[VersionMeta] = []
        self.version_log: list[VersionMeta] = []
        self._version_ids = itertools.count(0)
        # running bitmap state, advanced by build_snapshot
        self._bits_data = np.zeros(0, dtype=np.uint8)
        self._bits_delta = np.zeros(0, dtype=np.uint8)
        self._cursor = 0
        self.snapshot_ts = 0
        self._last_commit_ts = 0
        self._delta_high = 0
        self._transactions = weakref.WeakSet()

    # --- geometry helpers ---

    @property
    def schema(self):
        return self.layout.schema

    @property
    def row_bytes(self) -> int:
        return self.layout.schema.row_bytes

    @property
    def row_count(self) -> int:
        return len(self.newest)

    @property
    def bitmap_replication(self) -> int:
        return sum(p.devices for p in self.layout.parts)

    @property
    def delta_scan_rows(self) -> int:
        """Delta rows an analytical scan must cover (allocation high-water)."""
        return self._delta_high

    def rotation_class(self, row: int) -> int:
        d = self.allocator.devices
        return (row // self.layout.block_size) % d

    def _billing_banks(self, rows) -> list[tuple[int, int, int]]:
        from .layout import bank_of_block
        banks = set()
        for row in rows:
            bank = bank_of_block(self.layout, row // self.layout.block_size)
            for p in self.layout.parts:
                banks.add((p.channel, p.rank, bank))
        return sorted(banks)

    # --- loading and transactions ---

    def bulk_load(self, images) -> None:
        """Install initial row versions at load timestamp 0."""
        images = np.ascontiguousarray(images, dtype=np.uint8)
        if images.ndim != 2 or images.shape[1] != self.row_bytes:
            raise TransactionError("bulk_load expects [n, %d] bytes" % self.row_bytes)
        base = self.row_count
        n = images.shape[0]
        if n == 0:
            return
        rows = np.arange(base, base + n, dtype=np.int64)
        self.data.ensure_capacity(base + n)
        self.data.write_rows(rows, images)
        for r in range(base, base + n):
            v = VersionMeta(next(self._version_ids), r, DATA, r, 0)
            self.newest.append(v)
            self.version_log.append(v)
        blocks = (self.row_count + self.layout.block_size - 1) // self.layout.block_size
        want = int(np.ceil(blocks * self.initial_delta_fraction))
        if self.allocator.blocks < want:
            self.allocator.grow_blocks(want - self.allocator.blocks)
            self.delta.ensure_capacity(self.allocator.rows)

    def begin(self) -> Transaction:
        tx = Transaction(self, next(self.ts))
        self._transactions.add(tx)
        return tx

    def has_open_transactions(self) -> bool:
        return any(t.state == "active" for t in self._transactions)

    def read_version(self, row: int, at_ts: int) -> np.ndarray | None:
        """Chain-walk read of the version visible at ``at_ts``."""
        if not (0 <= row < self.row_count):
            return None
        v = self.newest[row]
        while v is not None and v.write_ts > at_ts:
            v = v.prev
        if v is None or v.tombstone:
            return None
        v.read_ts = max(v.read_ts, at_ts)
        region = self.data if v.region == DATA else self.delta
        return region.read_row(v.pos)

    def _commit(self, tx: Transaction) -> int:
        # first committer wins: any newer committed version aborts this one
        for row in tx.writes:
            if self.newest[row].write_ts > tx.start_ts:
                raise ConflictError("row %d was modified by a newer transaction" % row)
        ts = next(self.ts)
        dirtied_rows = []
        dirty_bytes = 0
        for row in sorted(tx.writes):
            image = tx.writes[row]
            prev = self.newest[row]
            if image is None:
                v = VersionMeta(next(self._version_ids), row, TOMBSTONE, -1, ts, prev)
            else:
                slot = self.allocator.alloc(self.rotation_class(row))
                self.delta.ensure_capacity(self.allocator.rows)
                if slot >= len(self.delta_origin):
                    grown = np.full(self.allocator.rows, -1, dtype=np.int64)
                    grown[:len(self.delta_origin)] = self.delta_origin
                    self.delta_origin = grown
                self.delta.write_row(slot, image)
                self.delta_origin[slot] = row
                self._delta_high = max(self._delta_high, slot + 1)
                v = VersionMeta(next(self._version_ids), row, DELTA, slot, ts, prev)
                dirtied_rows.append(slot)
                dirty_bytes += self.row_bytes
            self.newest[row] = v
            self.version_log.append(v)
        base = self.row_count
        if tx.inserts:
            images = np.stack(tx.inserts)
            rows = np.arange(base, base + len(tx.inserts), dtype=np.int64)
            self.data.ensure_capacity(base + len(tx.inserts))
            self.data.write_rows(rows, images)
            for r in rows:
                v = VersionMeta(next(self._version_ids), int(r), DATA, int(r), ts)
                self.newest.append(v)
                self.version_log.append(v)
                dirtied_rows.append(int(r))
            dirty_bytes += self.row_bytes * len(tx.inserts)
        if self.memory is not None:
            lines = sum(_row_lines(p, r, self.memory.geometry)
                        for r in dirtied_rows for p in self.layout.parts)
            if lines:
                self.memory.cpu_access_lines(lines, dirty_bytes,
                                             self._billing_banks(dirtied_rows),
                                             label="commit-writeback")
            t = self.memory.clock.now
            self.memory._record(t, t, "cpu", "commit-barrier")
        self._last_commit_ts = ts
        return ts

    # --- snapshots ---

    def build_snapshot(self, at_ts: int | None = None) -> SnapshotBitmap:
        """Advance the running bitmap to ``at_ts`` and return a frozen copy."""
        if at_ts is None:
            at_ts = self.last_commit_ts()
        if at_ts < self.snapshot_ts:
            raise TransactionError(
                "snapshots advance monotonically: at_ts %d < previous %d"
                % (at_ts, self.snapshot_ts))
        if len(self._bits_data) < self.row_count:
            grown = np.zeros(self.row_count, dtype=np.uint8)
            grown[:len(self._bits_data)] = self._bits_data
            self._bits_data = grown
        if len(self._bits_delta) < self.allocator.rows:
            grown = np.zeros(self.allocator.rows, dtype=np.uint8)
            grown[:len(self._bits_delta)] = self._bits_delta
            self._bits_delta = grown
        start_cursor = self._cursor
        regions, positions, ops = [], [], []
        while self._cursor < len(self.version_log):
            v = self.version_log[self._cursor]
            if v.write_ts > at_ts:
                break
            if v.prev is not None and not v.prev.tombstone:
                regions.append(v.prev.region)
                positions.append(v.prev.pos)
                ops.append(0)
            if not v.tombstone:
                regions.append(v.region)
                positions.append(v.pos)
                ops.append(1)
            self._cursor += 1
        if positions:
            _kernels.snapshot_apply(self._bits_data, self._bits_delta,
                                    np.asarray(regions, dtype=np.uint8),
                                    np.asarray(positions, dtype=np.int64),
                                    np.asarray(ops, dtype=np.uint8))
        # consistency maintenance cost: read the replayed version metadata,
        # toggle the affected bits in every device's bitmap copy
        replayed = self._cursor - start_cursor
        if self.memory is not None and replayed:
            meta_bytes = VERSION_META_BYTES * replayed
            bit_bytes = math.ceil(len(positions) * self.bitmap_replication / 8)
            self.memory.cpu_transfer(meta_bytes + bit_bytes, label="snapshot-merge")
        self.snapshot_ts = at_ts
        return SnapshotBitmap(at_ts, self._bits_data.copy(), self._bits_delta.copy(),
                              self.bitmap_replication)

    def last_commit_ts(self) -> int:
        return self._last_commit_ts

    def visible_scan(self, column: str, snapshot: SnapshotBitmap):
        """(mask, values) over logical rows under the given snapshot.

        ``values[row]`` is meaningful where ``mask[row]`` is 1 and comes from
        whichever region holds the row's visible version. Values of columns
        wider than 8 B are the little-endian prefix of the first 8 bytes.
        """
        n = self.row_count
        mask = np.zeros(n, dtype=np.uint8)
        values = np.zeros(n, dtype=np.uint64)
        dbits = snapshot.data_bits[:n]
        mask[:len(dbits)] = dbits
        if n:
            data_vals = self.data.column_values(column, np.arange(n, dtype=np.int64))
            values[:len(dbits)] = np.where(dbits != 0, data_vals[:len(dbits)], 0)
        slots = np.nonzero(snapshot.delta_bits)[0]
        if len(slots):
            origins = self.delta_origin[slots]
            vals = self.delta.column_values(column, slots.astype(np.int64))
            mask[origins] = 1
            values[origins] = vals
        return mask, values

    # --- accounting ---

    def storage_breakdown(self) -> dict:
        """Physical bytes by purpose: payload, padding, bitmap copies."""
        rows_data = self.row_count
        rows_delta = self.allocator.rows
        footprint = self.layout.footprint_per_row * (rows_data + rows_delta)
        payload = self.layout.data_bytes_per_row * (rows_data + rows_delta)
        bitmap_bits = (rows_data + rows_delta) * self.bitmap_replication
        return {
            "rows_data": rows_data,
            "rows_delta": rows_delta,
            "region_bytes": footprint,
            "payload_capacity_bytes": payload,
            "padding_bytes": footprint - payload,
            "bitmap_bytes": bitmap_bits / 8.0,
            "padding_fraction": (footprint - payload) / footprint if footprint else 0.0,
            "bitmap_fraction": (bitmap_bits / 8.0) / footprint if footprint else 0.0,
        }

    def chain_lengths(self) -> list[int]:
        out = []
        for v in self.newest:
            n = 0
            while v is not None:
                n += 1
                v = v.prev
            out.append(n)
        return out

    def delta_rows_used(self) -> int:
        return int((self.delta_origin >= 0).sum())

    # --- dump / restore ---

    def dump(self) -> str:
        versions = []
        for v in self.version_log:
            versions.append([v.version_id, v.row, v.region, v.pos, v.write_ts,
                             v.read_ts, v.prev.version_id if v.prev else -1])
        doc = {
            "format": "pimhtap-store-v1",
            "rows": self.row_count,
            "delta_blocks": self.allocator.blocks,
            "delta_origin": self.delta_origin.tolist(),
            "snapshot_ts": self.snapshot_ts,
            "cursor": self._cursor,
            "bits_data": base64.b64encode(self._bits_data.tobytes()).decode(),
            "bits_delta": base64.b64encode(self._bits_delta.tobytes()).decode(),
            "versions": versions,
            "data": [base64.b64encode(r.tobytes()).decode() for r in self.data.regions],
            "delta": [base64.b64encode(r.tobytes()).decode() for r in self.delta.regions],
        }
        return json.dumps(doc)

    def restore(self, text: str) -> None:
        doc = json.loads(text)
        if doc.get("format") != "pimhtap-store-v1":
            raise TransactionError("unknown store dump format")
        n = doc["rows"]
        self.data.ensure_capacity(max(n, 1))
        self.allocator.reset()
        self.allocator.grow_blocks(max(0, doc["delta_blocks"] - self.allocator.blocks))
        self.delta.ensure_capacity(max(self.allocator.rows, 1))
        for i, blob in enumerate(doc["data"]):
            raw = np.frombuffer(base64.b64decode(blob), dtype=np.uint8)
            self.data.regions[i][:, :] = 0
            self.data.regions[i].reshape(-1)[:len(raw)] = raw
        for i, blob in enumerate(doc["delta"]):
            raw = np.frombuffer(base64.b64decode(blob), dtype=np.uint8)
            self.delta.regions[i][:, :] = 0
            self.delta.regions[i].reshape(-1)[:len(raw)] = raw
        self.delta_origin = np.asarray(doc["delta_origin"], dtype=np.int64)
        by_id: dict[int, VersionMeta] = {}
        self.version_log = []
        for vid, row, region, pos, wts, rts, prev_id in doc["versions"]:
            v = VersionMeta(vid, row, region, pos, wts,
                            by_id[prev_id] if prev_id >= 0 else None)
            v.read_ts = rts
            by_id[vid] = v
            self.version_log.append(v)
        self.newest = [None] * n
        for v in self.version_log:
            self.newest[v.row] = v
        taken = set()
        for v in self.version_log:
            if v.region == DELTA:
                taken.add(v.pos)
        for cls in self.allocator.free:
            remaining = deque(s for s in cls if s not in taken)
            cls.clear()
            cls.extend(remaining)
        self._bits_data = np.frombuffer(
            base64.b64decode(doc["bits_data"]), dtype=np.uint8).copy()
        self._bits_delta = np.frombuffer(
            base64.b64decode(doc["bits_delta"]), dtype=np.uint8).copy()
        self._cursor = doc["cursor"]
        self.snapshot_ts = doc["snapshot_ts"]
        self._last_commit_ts = max((v.write_ts for v in self.version_log), default=0)
        used = np.nonzero(self.delta_origin >= 0)[0]
        self._delta_high = int(used[-1]) + 1 if len(used) else 0
        self._version_ids = itertools.count(max(by_id) + 1 if by_id else 0)
