"""Desk-scale HTAP workload: catalog, data generators, transaction drivers.

The catalog is a four-table CH-style mix shrunk to desk size (thousands of
rows instead of millions): a customer table with the width profile
{2, 2, 4, 9, 2, 2}, an item table whose 22-byte name column is the wide key
that makes PIM-side defragmentation pay off, an order table no analytical
query touches (so it has no key columns at all), and an orderline table
carrying the aggregation and join workload.

Everything downstream of a seed is deterministic: the same seed gives
byte-identical stores and the same transaction stream.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConflictError, SchemaError
from .geometry import Geometry
from .layout import DEFAULT_BLOCK_SIZE, generate_compact_layout
from .memory import MemorySystem
from .mvcc import TableStore, Transaction
from .schema import (ColumnSpec, Query, TableSchema, WorkloadSpec,
                     derive_key_columns)

DESK_ROW_COUNTS = {"customer": 3000, "item": 5000, "order": 10000,
                   "orderline": 30000}


def desk_tables(scale: float = 1.0) -> dict[str, TableSchema]:
    """The four desk tables (key flags not yet derived)."""
    if scale < 0:
        raise SchemaError("scale must be >= 0")
    counts = {n: int(round(c * scale)) for n, c in DESK_ROW_COUNTS.items()}
    tables = [
        TableSchema("customer", (
            ColumnSpec("c_id", 2),
            ColumnSpec("c_d_id", 2),
            ColumnSpec("c_w_id", 4),
            ColumnSpec("c_zip", 9),
            ColumnSpec("c_state", 2),
            ColumnSpec("c_credit", 2),
        ), counts["customer"]),
        TableSchema("item", (
            ColumnSpec("i_id", 3),
            ColumnSpec("i_im_id", 4),
            ColumnSpec("i_name", 22),
            ColumnSpec("i_price", 4),
            ColumnSpec("i_data", 131),
            ColumnSpec("i_desc", 44),
        ), counts["item"]),
        TableSchema("order", (
            ColumnSpec("o_id", 4),
            ColumnSpec("o_d_id", 2),
            ColumnSpec("o_w_id", 4),
            ColumnSpec("o_c_id", 2),
            ColumnSpec("o_entry_d", 8),
            ColumnSpec("o_carrier_id", 2),
            ColumnSpec("o_ol_cnt", 2),
        ), counts["order"]),
        TableSchema("orderline", (
            ColumnSpec("ol_o_id", 4),
            ColumnSpec("ol_d_id", 2),
            ColumnSpec("ol_w_id", 4),
            ColumnSpec("ol_number", 2),
            ColumnSpec("ol_i_id", 3),
            ColumnSpec("ol_supply_w_id", 4),
            ColumnSpec("ol_delivery_d", 8),
            ColumnSpec("ol_quantity", 2),
            ColumnSpec("ol_amount", 4),
            ColumnSpec("ol_dist_info", 23),
        ), counts["orderline"]),
    ]
    return {t.name: t for t in tables}


def desk_workload() -> WorkloadSpec:
    queries = (
        Query("q1", "aggregation",
              (("orderline", "ol_quantity"), ("orderline", "ol_amount"))),
        Query("q6", "filter",
              (("orderline", "ol_quantity"), ("orderline", "ol_amount"))),
        Query("q9", "join",
              (("item", "i_price"), ("item", "i_id"),
               ("orderline", "ol_i_id"), ("orderline", "ol_amount"))),
        Query("q_name", "filter", (("item", "i_name"),)),
        Query("q3", "filter",
              (("customer", "c_id"), ("customer", "c_d_id"),
               ("customer", "c_w_id"))),
    )
    mix = (("payment", 0.5), ("neworder", 0.5))
    return WorkloadSpec(queries, mix)


def desk_catalog(scale: float = 1.0):
    """(tables, workload) with key flags derived from the query set."""
    workload = desk_workload()
    tables = {n: derive_key_columns(t, workload)
              for n, t in desk_tables(scale).items()}
    return tables, workload


# --- row image encoding ---


def encode_rows(schema: TableSchema, columns: dict) -> np.ndarray:
    """Pack per-column values into contiguous row images.

    A column no wider than 8 B takes an unsigned integer array (encoded
    little-endian); a wider column takes a ``uint8[n, width]`` matrix.
    """
    missing = {c.name for c in schema.columns} - set(columns)
    if missing:
        raise SchemaError("missing column data for %s" % sorted(missing))
    n = None
    for name, vals in columns.items():
        m = len(vals)
        if n is None:
            n = m
        elif m != n:
            raise SchemaError("column %r has %d rows, expected %d" % (name, m, n))
    n = n or 0
    out = np.zeros((n, schema.row_bytes), dtype=np.uint8)
    off = 0
    for col in schema.columns:
        vals = columns[col.name]
        if col.width <= 8:
            v = np.asarray(vals, dtype=np.uint64)
            for b in range(col.width):
                out[:, off + b] = ((v >> np.uint64(8 * b)) & np.uint64(0xFF)).astype(np.uint8)
        else:
            m = np.asarray(vals, dtype=np.uint8)
            if m.shape != (n, col.width):
                raise SchemaError("column %r needs a [n, %d] byte matrix"
                                  % (col.name, col.width))
            out[:, off:off + col.width] = m
        off += col.width
    return out


def decode_column(schema: TableSchema, images: np.ndarray, column: str) -> np.ndarray:
    """Little-endian integer of the column's first min(width, 8) bytes."""
    off = schema.column_offset(column)
    w = min(schema.column(column).width, 8)
    chunk = np.asarray(images, dtype=np.uint8)[:, off:off + w].astype(np.uint64)
    weights = np.uint64(1) << (np.uint64(8) * np.arange(w, dtype=np.uint64))
    return chunk @ weights


# --- generators ---


def generate_customer(rng: np.random.Generator, n: int) -> np.ndarray:
    schema = desk_tables()["customer"]
    cols = {
        "c_id": rng.integers(0, 3000, n),
        "c_d_id": rng.integers(1, 11, n),
        "c_w_id": rng.integers(1, 17, n),
        "c_zip": rng.integers(48, 58, (n, 9)).astype(np.uint8),
        "c_state": rng.integers(65, 91, n) * 256 + rng.integers(65, 91, n),
        "c_credit": rng.integers(0, 2, n),
    }
    return encode_rows(schema, cols)


def generate_item(rng: np.random.Generator, n: int) -> np.ndarray:
    schema = desk_tables()["item"]
    cols = {
        "i_id": np.arange(n, dtype=np.uint64),
        "i_im_id": rng.integers(1, 10000, n),
        "i_name": rng.integers(97, 123, (n, 22)).astype(np.uint8),
        "i_price": rng.integers(100, 10000, n),
        "i_data": rng.integers(32, 127, (n, 131)).astype(np.uint8),
        "i_desc": rng.integers(32, 127, (n, 44)).astype(np.uint8),
    }
    return encode_rows(schema, cols)


def generate_order(rng: np.random.Generator, n: int, customers: int) -> np.ndarray:
    schema = desk_tables()["order"]
    cols = {
        "o_id": np.arange(n, dtype=np.uint64),
        "o_d_id": rng.integers(1, 11, n),
        "o_w_id": rng.integers(1, 17, n),
        "o_c_id": rng.integers(0, max(customers, 1), n),
        "o_entry_d": rng.integers(1_500_000_000, 1_800_000_000, n),
        "o_carrier_id": rng.integers(0, 11, n),
        "o_ol_cnt": rng.integers(5, 16, n),
    }
    return encode_rows(schema, cols)


def generate_orderline(rng: np.random.Generator, n: int, items: int,
                       orders: int) -> np.ndarray:
    schema = desk_tables()["orderline"]
    cols = {
        "ol_o_id": rng.integers(0, max(orders, 1), n),
        "ol_d_id": rng.integers(1, 11, n),
        "ol_w_id": rng.integers(1, 17, n),
        "ol_number": rng.integers(1, 16, n),
        "ol_i_id": rng.integers(0, max(items, 1), n),
        "ol_supply_w_id": rng.integers(1, 17, n),
        "ol_delivery_d": rng.integers(1_500_000_000, 1_800_000_000, n),
        "ol_quantity": rng.integers(1, 51, n),
        "ol_amount": rng.integers(1, 10000, n),
        "ol_dist_info": rng.integers(32, 127, (n, 23)).astype(np.uint8),
    }
    return encode_rows(schema, cols)


@dataclass
class DeskDatabase:
    """One simulated instance: stores sharing a clock and timestamp counter."""

    geometry: Geometry
    memory: MemorySystem | None
    tables: dict[str, TableSchema]
    workload: WorkloadSpec
    stores: dict[str, TableStore]
    th: float
    seed: int

    def store(self, name: str) -> TableStore:
        return self.stores[name]


def build_desk(geometry: Geometry | None = None, th: float = 0.6,
               seed: int = 0, scale: float = 1.0,
               block_size: int = DEFAULT_BLOCK_SIZE,
               with_memory: bool = True) -> DeskDatabase:
    """Generate, lay out, and bulk-load the desk database."""
    geometry = geometry if geometry is not None else Geometry()
    tables, workload = desk_catalog(scale)
    memory = MemorySystem(geometry, track_events=False) if with_memory else None
    ts = itertools.count(1)
    rng = np.random.default_rng(seed)
    stores: dict[str, TableStore] = {}
    images = {
        "customer": generate_customer(rng, tables["customer"].row_count),
        "item": generate_item(rng, tables["item"].row_count),
        "order": generate_order(rng, tables["order"].row_count,
                                tables["customer"].row_count),
        "orderline": generate_orderline(rng, tables["orderline"].row_count,
                                        tables["item"].row_count,
                                        tables["order"].row_count),
    }
    for name in ("customer", "item", "order", "orderline"):
        layout = generate_compact_layout(tables[name], geometry, th, block_size)
        store = TableStore(layout, memory=memory, ts_counter=ts)
        store.bulk_load(images[name])
        stores[name] = store
    return DeskDatabase(geometry, memory, tables, workload, stores, th, seed)


# --- transaction drivers ---


def payment(stores: dict[str, TableStore], rng: np.random.Generator) -> list[Transaction]:
    """Touch one customer: re-stamp state bytes and flip the credit flag."""
    cust = stores["customer"]
    if cust.row_count == 0:
        return []
    tx = cust.begin()
    row = int(rng.integers(cust.row_count))
    img = tx.read(row)
    if img is None:
        tx.abort()
        return []
    img = img.copy()
    off = cust.schema.column_offset("c_state")
    img[off:off + 2] = rng.integers(65, 91, 2).astype(np.uint8)
    off = cust.schema.column_offset("c_credit")
    img[off] ^= 1
    tx.update(row, img)
    return [tx]


def neworder(stores: dict[str, TableStore], rng: np.random.Generator) -> list[Transaction]:
    """Bump one item's price, insert an orderline, sometimes amend one."""
    txs = []
    item = stores["item"]
    ol = stores["orderline"]
    if item.row_count:
        tx = item.begin()
        row = int(rng.integers(item.row_count))
        img = tx.read(row)
        if img is None:
            tx.abort()
        else:
            img = img.copy()
            off = item.schema.column_offset("i_price")
            price = int.from_bytes(bytes(img[off:off + 4]), "little")
            img[off:off + 4] = np.frombuffer(
                ((price + 1) % (1 << 32)).to_bytes(4, "little"), dtype=np.uint8)
            tx.update(row, img)
            txs.append(tx)
    if item.row_count:
        tx = ol.begin()
        tx.insert(generate_orderline(rng, 1, item.row_count,
                                     stores["order"].row_count)[0])
        if ol.row_count and rng.random() < 0.5:
            row = int(rng.integers(ol.row_count))
            img = tx.read(row)
            if img is not None:
                img = img.copy()
                off = ol.schema.column_offset("ol_quantity")
                qty = int.from_bytes(bytes(img[off:off + 2]), "little")
                img[off:off + 2] = np.frombuffer(
                    (qty % 50 + 1).to_bytes(2, "little"), dtype=np.uint8)
                tx.update(row, img)
        txs.append(tx)
    return txs


TX_DRIVERS = {"payment": payment, "neworder": neworder}


@dataclass
class OltpStats:
    requested: int = 0
    committed: int = 0
    aborted: int = 0
    started: float = 0.0
    finished: float = 0.0
    cpu_bytes: int = 0
    snapshot_time: float = 0.0
    by_kind: dict = field(default_factory=dict)

    @property
    def elapsed(self) -> float:
        return self.finished - self.started

    @property
    def throughput(self) -> float:
        return self.committed / self.elapsed if self.elapsed > 0 else 0.0


def run_oltp(db: DeskDatabase, count: int, rng: np.random.Generator,
             batch: int = 4, snapshot_every: int = 0,
             mix=None) -> OltpStats:
    """Drive ``count`` transactions in interleaved batches.

    Transactions within a batch all begin before any of them commits, so
    colliding row writes surface as first-committer-wins aborts. With
    ``snapshot_every`` set, every store's snapshot advances after that many
    commits (billing the bitmap maintenance).
    """
    mix = mix if mix is not None else db.workload.transaction_mix
    names = [n for n, _ in mix]
    weights = np.array([w for _, w in mix], dtype=float)
    if not len(names) or weights.sum() <= 0:
        raise SchemaError("transaction mix is empty")
    weights = weights / weights.sum()
    memory = db.memory
    stats = OltpStats()
    if memory is not None:
        stats.started = memory.clock.now
        cpu_bytes0 = memory.stats["cpu"].bytes_billed
    since_snapshot = 0
    done = 0
    while done < count:
        k = min(batch, count - done)
        kinds = rng.choice(names, size=k, p=weights)
        staged = []
        for kind in kinds:
            stats.requested += 1
            staged.append((kind, TX_DRIVERS[kind](db.stores, rng)))
        for kind, txs in staged:
            ok = True
            for tx in txs:
                if not ok:
                    tx.abort()
                    continue
                try:
                    tx.commit()
                except ConflictError:
                    ok = False
            if txs and ok:
                stats.committed += 1
                since_snapshot += 1
                stats.by_kind[kind] = stats.by_kind.get(kind, 0) + 1
            elif txs:
                stats.aborted += 1
        done += k
        if snapshot_every and since_snapshot >= snapshot_every:
            since_snapshot = 0
            t0 = memory.clock.now if memory is not None else 0.0
            for store in db.stores.values():
                store.build_snapshot(store.last_commit_ts())
            if memory is not None:
                stats.snapshot_time += memory.clock.now - t0
    if memory is not None:
        stats.finished = memory.clock.now
        stats.cpu_bytes = memory.stats["cpu"].bytes_billed - cpu_bytes0
    return stats
