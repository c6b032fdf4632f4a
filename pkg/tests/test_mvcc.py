"""Version store tests: transactions, snapshot bitmaps, and accounting."""

import dataclasses
import math

import numpy as np
import pytest

from pimhtap.errors import ConflictError, TransactionError
from pimhtap.geometry import Geometry
from pimhtap.layout import generate_compact_layout, locate
from pimhtap.memory import CPU, MemorySystem
from pimhtap.mvcc import (DATA, DELTA, TOMBSTONE, VERSION_META_BYTES,
                          SnapshotBitmap, TableStore)
from pimhtap.schema import ColumnSpec, TableSchema


def small_store(memory=None, block_size=64, rows=256):
    g = dataclasses.replace(Geometry(), devices_per_rank=4)
    schema = TableSchema("t", (
        ColumnSpec("id", 4, is_key=True),
        ColumnSpec("val", 4),
        ColumnSpec("note", 8),
    ))
    layout = generate_compact_layout(schema, g, th=0.6, block_size=block_size)
    store = TableStore(layout, memory=memory)
    images = np.zeros((rows, 16), dtype=np.uint8)
    images[:, 0:4] = np.arange(rows, dtype=np.uint32).view(np.uint8).reshape(rows, 4)
    images[:, 4] = 1
    store.bulk_load(images)
    return store


def image_for(store, row, val):
    img = np.zeros(store.row_bytes, dtype=np.uint8)
    img[0:4] = np.array([row], dtype=np.uint32).view(np.uint8)
    img[4:8] = np.array([val], dtype=np.uint32).view(np.uint8)
    return img


def oracle_visible(store, at_ts):
    """Chain-walking reference: logical row -> (region, pos)."""
    out = {}
    for row, v in enumerate(store.newest):
        while v is not None and v.write_ts > at_ts:
            v = v.prev
        if v is not None and not v.tombstone:
            out[row] = (v.region, v.pos)
    return out


def bitmap_visible(store, snap):
    out = {}
    for pos in np.nonzero(snap.data_bits)[0]:
        out[int(pos)] = (DATA, int(pos))
    for slot in np.nonzero(snap.delta_bits)[0]:
        out[int(store.delta_origin[slot])] = (DELTA, int(slot))
    return out


# --- transactions ---


def test_bulk_load_installs_base_versions():
    store = small_store()
    assert store.row_count == 256
    assert all(v.region == DATA and v.write_ts == 0 for v in store.newest)
    img = store.read_version(7, at_ts=0)
    assert img is not None and img[4] == 1


def test_update_creates_delta_version_and_preserves_history():
    store = small_store()
    tx = store.begin()
    tx.update(5, image_for(store, 5, 42))
    ts = tx.commit()
    v = store.newest[5]
    assert v.region == DELTA and v.prev.region == DATA
    old = store.read_version(5, at_ts=ts - 1)
    new = store.read_version(5, at_ts=ts)
    assert old[4] == 1 and new[4] == 42


def test_transaction_sees_snapshot_and_own_writes():
    store = small_store()
    t1 = store.begin()
    t2 = store.begin()
    t1.update(3, image_for(store, 3, 9))
    assert t1.read(3)[4] == 9
    assert t2.read(3)[4] == 1
    t1.commit()
    # t2 started before t1 committed, so it still sees the old image
    assert t2.read(3)[4] == 1


def test_delete_writes_tombstone():
    store = small_store()
    tx = store.begin()
    tx.delete(10)
    assert tx.read(10) is None
    ts = tx.commit()
    assert store.newest[10].tombstone
    assert store.newest[10].pos == -1
    assert store.read_version(10, at_ts=ts) is None
    assert store.read_version(10, at_ts=ts - 1) is not None


def test_insert_appends_to_data_region():
    store = small_store()
    tx = store.begin()
    tx.insert(image_for(store, 256, 77))
    tx.insert(image_for(store, 257, 78))
    ts = tx.commit()
    assert store.row_count == 258
    assert store.newest[257].region == DATA
    assert store.read_version(257, at_ts=ts)[4] == 78
    assert store.read_version(257, at_ts=ts - 1) is None


def test_first_committer_wins():
    store = small_store()
    t1 = store.begin()
    t2 = store.begin()
    t1.update(4, image_for(store, 4, 1))
    t2.update(4, image_for(store, 4, 2))
    t1.commit()
    with pytest.raises(ConflictError):
        t2.commit()
    assert t2.state == "aborted"
    with pytest.raises(TransactionError):
        t2.read(4)


def test_disjoint_writers_both_commit():
    store = small_store()
    t1 = store.begin()
    t2 = store.begin()
    t1.update(1, image_for(store, 1, 5))
    t2.update(2, image_for(store, 2, 6))
    t1.commit()
    t2.commit()
    ts = store.last_commit_ts()
    assert store.read_version(1, ts)[4] == 5
    assert store.read_version(2, ts)[4] == 6


def test_update_validation():
    store = small_store()
    tx = store.begin()
    with pytest.raises(TransactionError):
        tx.update(9999, image_for(store, 0, 0))
    with pytest.raises(TransactionError):
        tx.update(0, np.zeros(3, dtype=np.uint8))
    tx.abort()
    with pytest.raises(TransactionError):
        tx.update(0, image_for(store, 0, 0))
    assert not store.has_open_transactions()


def test_updating_deleted_row_fails():
    store = small_store()
    t = store.begin()
    t.delete(6)
    t.commit()
    t2 = store.begin()
    with pytest.raises(TransactionError):
        t2.update(6, image_for(store, 6, 1))


def test_delta_slot_keeps_rotation_class():
    store = small_store(block_size=64)
    rng = np.random.default_rng(0)
    t = store.begin()
    rows = rng.choice(store.row_count, size=40, replace=False)
    for r in rows:
        t.update(int(r), image_for(store, int(r), 3))
    t.commit()
    d = store.allocator.devices
    for v in store.version_log:
        if v.region != DELTA:
            continue
        assert store.rotation_class(v.row) == (v.pos // store.layout.block_size) % d
        # same physical device for the origin and delta copies of any byte
        origin = locate(store.layout, v.row, "id")[0]
        moved = locate(store.layout, v.pos, "id")[0]
        assert origin.device == moved.device


# --- snapshots ---


def test_snapshot_matches_chain_walk_oracle():
    store = small_store()
    rng = np.random.default_rng(1)
    for step in range(120):
        tx = store.begin()
        for r in rng.choice(store.row_count, size=rng.integers(1, 4), replace=False):
            if store.read_version(int(r), tx.start_ts) is None:
                continue
            if rng.random() < 0.1:
                tx.delete(int(r))
            else:
                tx.update(int(r), image_for(store, int(r), int(rng.integers(1, 99))))
        if rng.random() < 0.1:
            tx.insert(image_for(store, store.row_count, 50))
        tx.commit()
        if step % 20 == 19:
            snap = store.build_snapshot()
            assert bitmap_visible(store, snap) == oracle_visible(store, snap.snapshot_ts)


def test_snapshot_excludes_versions_after_at_ts():
    store = small_store()
    t1 = store.begin()
    t1.update(0, image_for(store, 0, 8))
    ts1 = t1.commit()
    t2 = store.begin()
    t2.update(0, image_for(store, 0, 9))
    t2.commit()
    snap = store.build_snapshot(at_ts=ts1)
    assert bitmap_visible(store, snap)[0] == (DELTA, store.newest[0].prev.pos)
    # advancing later picks up the rest of the log
    snap2 = store.build_snapshot()
    assert bitmap_visible(store, snap2)[0] == (DELTA, store.newest[0].pos)


def test_snapshot_must_advance():
    store = small_store()
    t = store.begin()
    t.update(0, image_for(store, 0, 1))
    t.commit()
    store.build_snapshot()
    with pytest.raises(TransactionError):
        store.build_snapshot(at_ts=0)


def test_snapshot_bits_are_frozen_copies():
    store = small_store()
    snap = store.build_snapshot()
    before = snap.data_bits.copy()
    t = store.begin()
    t.update(0, image_for(store, 0, 2))
    t.commit()
    store.build_snapshot()
    assert np.array_equal(snap.data_bits, before)


def test_exactly_one_bit_per_live_chain():
    store = small_store()
    rng = np.random.default_rng(2)
    for _ in range(50):
        t = store.begin()
        r = int(rng.integers(0, store.row_count))
        if store.read_version(r, t.start_ts) is not None:
            t.update(r, image_for(store, r, 1))
        t.commit()
    snap = store.build_snapshot()
    live = sum(1 for v in store.newest if not v.tombstone)
    assert int(snap.data_bits.sum()) + int(snap.delta_bits.sum()) == live


def test_visible_scan_matches_read_version():
    store = small_store()
    rng = np.random.default_rng(3)
    for _ in range(60):
        t = store.begin()
        r = int(rng.integers(0, store.row_count))
        if rng.random() < 0.15 and store.read_version(r, t.start_ts) is not None:
            t.delete(r)
        elif store.read_version(r, t.start_ts) is not None:
            t.update(r, image_for(store, r, int(rng.integers(0, 200))))
        t.commit()
    snap = store.build_snapshot()
    mask, values = store.visible_scan("val", snap)
    for row in range(store.row_count):
        img = store.read_version(row, snap.snapshot_ts)
        if img is None:
            assert mask[row] == 0
        else:
            assert mask[row] == 1
            assert values[row] == int.from_bytes(bytes(img[4:8]), "little")


def test_delta_scan_rows_tracks_high_water():
    store = small_store()
    assert store.delta_scan_rows == 0
    t = store.begin()
    t.update(0, image_for(store, 0, 1))
    t.commit()
    high = store.delta_scan_rows
    assert high > 0
    t = store.begin()
    t.update(1, image_for(store, 1, 1))
    t.commit()
    assert store.delta_scan_rows >= high


# --- accounting ---


def test_storage_breakdown_arithmetic():
    store = small_store()
    b = store.storage_breakdown()
    rows = b["rows_data"] + b["rows_delta"]
    assert b["region_bytes"] == store.layout.footprint_per_row * rows
    assert b["payload_capacity_bytes"] == store.layout.data_bytes_per_row * rows
    assert b["padding_bytes"] == b["region_bytes"] - b["payload_capacity_bytes"]
    assert b["bitmap_bytes"] == rows * store.bitmap_replication / 8.0
    assert b["padding_fraction"] == pytest.approx(
        b["padding_bytes"] / b["region_bytes"])
    assert store.bitmap_replication == sum(p.devices for p in store.layout.parts)


def test_snapshot_merge_billing():
    memory = MemorySystem(Geometry())
    store = small_store(memory=memory)
    store.build_snapshot()  # absorb the bulk-load versions first
    t = store.begin()
    t.update(0, image_for(store, 0, 1))
    t.update(1, image_for(store, 1, 1))
    t.commit()
    before = memory.stats[CPU].useful_bytes
    store.build_snapshot()
    merged = memory.stats[CPU].useful_bytes - before
    # 2 replayed versions; each toggles its base bit off and delta bit on
    want = VERSION_META_BYTES * 2 + math.ceil(4 * store.bitmap_replication / 8)
    assert merged == want
    events = [e for e in memory.events if e.label == "snapshot-merge"]
    assert len(events) == 2  # one per build_snapshot call that replayed versions


def test_commit_writeback_is_billed():
    memory = MemorySystem(Geometry())
    store = small_store(memory=memory)
    t = store.begin()
    t.update(0, image_for(store, 0, 1))
    t.commit()
    labels = {e.label for e in memory.events}
    assert "commit-writeback" in labels and "commit-barrier" in labels
    assert memory.stats[CPU].bytes_billed > 0


def test_chain_lengths_and_delta_usage():
    store = small_store()
    for _ in range(3):
        t = store.begin()
        t.update(0, image_for(store, 0, 1))
        t.commit()
    lengths = store.chain_lengths()
    assert lengths[0] == 4 and lengths[1] == 1
    assert store.delta_rows_used() == 3


# --- dump / restore ---


def test_dump_restore_round_trip():
    store = small_store()
    rng = np.random.default_rng(4)
    for _ in range(40):
        t = store.begin()
        r = int(rng.integers(0, store.row_count))
        if store.read_version(r, t.start_ts) is not None:
            t.update(r, image_for(store, r, int(rng.integers(0, 200))))
        t.commit()
    snap = store.build_snapshot()
    text = store.dump()

    clone = TableStore(store.layout)
    clone.restore(text)
    assert clone.row_count == store.row_count
    assert clone.last_commit_ts() == store.last_commit_ts()
    snap2 = clone.build_snapshot()
    assert snap2.snapshot_ts == snap.snapshot_ts
    assert np.array_equal(snap2.data_bits[:store.row_count],
                          snap.data_bits[:store.row_count])
    m1, v1 = store.visible_scan("val", snap)
    m2, v2 = clone.visible_scan("val", snap2)
    assert np.array_equal(m1, m2) and np.array_equal(v1, v2)
    # the clone keeps working: new commits get fresh version ids
    t = clone.begin()
    t.update(0, image_for(clone, 0, 123))
    t.commit()
    ids = [v.version_id for v in clone.version_log]
    assert len(ids) == len(set(ids))


def test_restore_rejects_unknown_format():
    store = small_store()
    with pytest.raises(TransactionError):
        store.restore('{"format": "something-else"}')
