"""Desk workload tests: catalog shape, generators, drivers, OLTP loop."""

import numpy as np
import pytest

from pimhtap.errors import SchemaError
from pimhtap.workload import (DESK_ROW_COUNTS, build_desk, decode_column,
                              desk_catalog, desk_tables, desk_workload,
                              encode_rows, generate_item, generate_orderline,
                              neworder, payment, run_oltp)


def test_desk_table_widths():
    tables = desk_tables()
    assert [c.width for c in tables["customer"].columns] == [2, 2, 4, 9, 2, 2]
    assert tables["customer"].row_bytes == 21
    assert tables["item"].row_bytes == 208
    assert tables["order"].row_bytes == 24
    assert tables["orderline"].row_bytes == 56
    assert {n: t.row_count for n, t in tables.items()} == DESK_ROW_COUNTS


def test_desk_scale_shrinks_row_counts():
    tables = desk_tables(scale=0.1)
    assert tables["customer"].row_count == 300
    assert tables["orderline"].row_count == 3000
    with pytest.raises(SchemaError):
        desk_tables(scale=-1)


def test_catalog_derives_keys_from_queries():
    tables, workload = desk_catalog()
    keys = {n: {c.name for c in t.key_columns} for n, t in tables.items()}
    assert keys["customer"] == {"c_id", "c_d_id", "c_w_id"}
    assert keys["item"] == {"i_id", "i_im_id", "i_name", "i_price"} - {"i_im_id"}
    assert keys["order"] == set()
    assert keys["orderline"] == {"ol_quantity", "ol_amount", "ol_i_id"}
    assert [q.query_id for q in workload.queries] == ["q1", "q6", "q9", "q_name", "q3"]
    assert dict(workload.transaction_mix) == {"payment": 0.5, "neworder": 0.5}


def test_encode_rows_and_decode_column_round_trip():
    schema = desk_tables()["orderline"]
    rng = np.random.default_rng(0)
    n = 50
    cols = {
        "ol_o_id": rng.integers(0, 1 << 32, n, dtype=np.uint64),
        "ol_d_id": rng.integers(0, 1 << 16, n, dtype=np.uint64),
        "ol_w_id": rng.integers(0, 1 << 32, n, dtype=np.uint64),
        "ol_number": rng.integers(0, 1 << 16, n, dtype=np.uint64),
        "ol_i_id": rng.integers(0, 1 << 24, n, dtype=np.uint64),
        "ol_supply_w_id": rng.integers(0, 1 << 32, n, dtype=np.uint64),
        "ol_delivery_d": rng.integers(0, 1 << 63, n, dtype=np.uint64),
        "ol_quantity": rng.integers(0, 1 << 16, n, dtype=np.uint64),
        "ol_amount": rng.integers(0, 1 << 32, n, dtype=np.uint64),
        "ol_dist_info": rng.integers(0, 256, (n, 23), dtype=np.uint8),
    }
    images = encode_rows(schema, cols)
    assert images.shape == (n, 56)
    for name in cols:
        if name == "ol_dist_info":
            off = schema.column_offset(name)
            assert np.array_equal(images[:, off:off + 23], cols[name])
            # decode of a wide column is the 8-byte little-endian prefix
            want = cols[name][:, :8].astype(np.uint64) @ (
                np.uint64(1) << (np.uint64(8) * np.arange(8, dtype=np.uint64)))
            assert np.array_equal(decode_column(schema, images, name), want)
        else:
            assert np.array_equal(decode_column(schema, images, name), cols[name])


def test_encode_rows_validation():
    schema = desk_tables()["customer"]
    with pytest.raises(SchemaError):
        encode_rows(schema, {"c_id": [1]})
    full = {c.name: [1] for c in schema.columns}
    full["c_zip"] = np.zeros((1, 9), dtype=np.uint8)
    encode_rows(schema, full)
    full["c_d_id"] = [1, 2]
    with pytest.raises(SchemaError):
        encode_rows(schema, full)
    full["c_d_id"] = [1]
    full["c_zip"] = np.zeros((1, 8), dtype=np.uint8)
    with pytest.raises(SchemaError):
        encode_rows(schema, full)


def test_generators_respect_value_ranges():
    rng = np.random.default_rng(1)
    items = generate_item(rng, 200)
    schema = desk_tables()["item"]
    price = decode_column(schema, items, "i_price")
    assert price.min() >= 100 and price.max() < 10000
    assert np.array_equal(decode_column(schema, items, "i_id"),
                          np.arange(200, dtype=np.uint64))
    ol = generate_orderline(rng, 500, items=200, orders=100)
    ol_schema = desk_tables()["orderline"]
    qty = decode_column(ol_schema, ol, "ol_quantity")
    assert qty.min() >= 1 and qty.max() <= 50
    assert decode_column(ol_schema, ol, "ol_i_id").max() < 200


def test_build_desk_is_deterministic():
    db1 = build_desk(seed=7, scale=0.02, with_memory=False)
    db2 = build_desk(seed=7, scale=0.02, with_memory=False)
    db3 = build_desk(seed=8, scale=0.02, with_memory=False)
    for name in db1.stores:
        r1 = db1.stores[name].data.regions
        r2 = db2.stores[name].data.regions
        assert all(np.array_equal(a, b) for a, b in zip(r1, r2))
    assert any(not np.array_equal(a, b)
               for a, b in zip(db1.stores["item"].data.regions,
                               db3.stores["item"].data.regions))
    assert db1.memory is None
    assert db1.store("customer") is db1.stores["customer"]


def test_build_desk_row_counts_and_layouts():
    db = build_desk(seed=0, scale=0.05)
    assert db.stores["customer"].row_count == 150
    assert db.stores["orderline"].row_count == 1500
    assert db.memory is not None
    for name, store in db.stores.items():
        assert store.layout.kind == "compact"
        assert store.layout.threshold == 0.6
    # stores share one timestamp counter: commits interleave globally
    t1 = db.stores["customer"].begin()
    t2 = db.stores["item"].begin()
    assert t2.start_ts == t1.start_ts + 1


def test_payment_driver_updates_customer():
    db = build_desk(seed=3, scale=0.02, with_memory=False)
    rng = np.random.default_rng(0)
    txs = payment(db.stores, rng)
    assert len(txs) == 1
    ts = txs[0].commit()
    cust = db.stores["customer"]
    changed = [v for v in cust.version_log if v.write_ts == ts]
    assert len(changed) == 1


def test_neworder_driver_inserts_orderline_and_bumps_price():
    db = build_desk(seed=4, scale=0.02, with_memory=False)
    rng = np.random.default_rng(0)
    item = db.stores["item"]
    ol = db.stores["orderline"]
    n0 = ol.row_count
    row_price_before = {}
    txs = neworder(db.stores, rng)
    assert len(txs) == 2
    for tx in txs:
        tx.commit()
    assert ol.row_count == n0 + 1
    # the touched item's price moved by exactly one
    bumped = [v for v in item.version_log if v.region == 1]
    assert len(bumped) == 1
    row = bumped[0].row
    ts = item.last_commit_ts()
    off = item.schema.column_offset("i_price")
    new = int.from_bytes(bytes(item.read_version(row, ts)[off:off + 4]), "little")
    old = int.from_bytes(bytes(item.read_version(row, 0)[off:off + 4]), "little")
    assert new == (old + 1) % (1 << 32)


def test_run_oltp_accounting():
    db = build_desk(seed=5, scale=0.02)
    rng = np.random.default_rng(5)
    stats = run_oltp(db, 200, rng, batch=4, snapshot_every=50)
    assert stats.requested == 200
    assert stats.committed + stats.aborted <= stats.requested
    assert stats.committed > 0
    assert set(stats.by_kind) <= {"payment", "neworder"}
    assert sum(stats.by_kind.values()) == stats.committed
    assert stats.elapsed > 0 and stats.throughput > 0
    assert stats.cpu_bytes > 0
    assert stats.snapshot_time > 0
    # order never commits (no driver touches it), everything else advances
    for name in ("customer", "item", "orderline"):
        assert db.stores[name].snapshot_ts > 0
    assert db.stores["order"].snapshot_ts == 0


def test_run_oltp_interleaved_batches_can_abort():
    # a payment-only mix on a tiny customer table forces row collisions
    db = build_desk(seed=6, scale=0.01, with_memory=False)
    rng = np.random.default_rng(6)
    stats = run_oltp(db, 400, rng, batch=8, mix=(("payment", 1.0),))
    assert stats.aborted > 0
    assert stats.by_kind.get("payment", 0) == stats.committed


def test_run_oltp_rejects_empty_mix():
    db = build_desk(seed=7, scale=0.01, with_memory=False)
    with pytest.raises(SchemaError):
        run_oltp(db, 10, np.random.default_rng(0), mix=())


def test_run_oltp_deterministic_stream():
    a = build_desk(seed=9, scale=0.02, with_memory=False)
    b = build_desk(seed=9, scale=0.02, with_memory=False)
    sa = run_oltp(a, 150, np.random.default_rng(1), batch=4)
    sb = run_oltp(b, 150, np.random.default_rng(1), batch=4)
    assert (sa.committed, sa.aborted, sa.by_kind) == (sb.committed, sb.aborted, sb.by_kind)
    for name in a.stores:
        va = [(v.row, v.region, v.pos, v.write_ts) for v in a.stores[name].version_log]
        vb = [(v.row, v.region, v.pos, v.write_ts) for v in b.stores[name].version_log]
        assert va == vb
