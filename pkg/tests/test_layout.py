"""Layout generator tests: placements, invariants, and the access model.

The customer-style table with a 9 B zip column is the hand-checked
walkthrough; its naive and compact placements are frozen here byte by byte.
"""

import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pimhtap.errors import LayoutError
from pimhtap.geometry import Geometry
from pimhtap.layout import (
    PlacedTable,
    PartLayout,
    Slot,
    TableLayout,
    bank_of_block,
    column_scan_bursts,
    effective_bandwidth,
    generate_compact_layout,
    generate_naive_layout,
    layout_to_dict,
    load_layout,
    locate,
    save_layout,
)
from pimhtap.schema import ColumnSpec, TableSchema


def geo(d=4):
    return dataclasses.replace(Geometry(), devices_per_rank=d)


def customer():
    return TableSchema("customer", (
        ColumnSpec("id", 2, is_key=True),
        ColumnSpec("d_id", 2, is_key=True),
        ColumnSpec("w_id", 4, is_key=True),
        ColumnSpec("zip", 9),
        ColumnSpec("state", 2),
        ColumnSpec("credit", 2),
    ))


def slot_map(part):
    return sorted((s.column, s.col_lo, s.col_hi, s.device, s.offset)
                  for s in part.slots)


# --- naive layout ---


def test_naive_groups_columns_in_declaration_order():
    lay = generate_naive_layout(customer(), geo())
    assert len(lay.parts) == 2
    p0, p1 = lay.parts
    assert p0.row_width == 9 and p1.row_width == 2
    assert [s.column for s in p0.slots] == ["id", "d_id", "w_id", "zip"]
    assert [s.device for s in p0.slots] == [0, 1, 2, 3]
    assert all(s.offset == 0 for s in p0.slots)
    assert [s.column for s in p1.slots] == ["state", "credit"]
    assert lay.footprint_per_row == 4 * 9 + 4 * 2
    assert lay.data_bytes_per_row == 21


def test_naive_scan_fetch_equals_footprint():
    # the 9 B stride part: 36 B fetched for 17 useful bytes per row
    rep = effective_bandwidth(generate_naive_layout(customer(), geo()), geo())
    p0 = rep.parts[0]
    assert p0["avg_lines_per_row"] == pytest.approx(36 / 64)
    contrib = p0["data_bytes_per_row"] / (p0["avg_lines_per_row"] * 64)
    assert contrib == pytest.approx(17 / 36)
    assert rep.cpu_efficiency == pytest.approx(21 / 44)


def test_naive_key_streaming_pays_full_bursts():
    # a 2 B key strided at 9 B fetches one 8 B burst per row
    rep = effective_bandwidth(generate_naive_layout(customer(), geo()), geo())
    assert rep.key_column_efficiency("id") == pytest.approx(2 / 8)
    assert rep.key_column_efficiency("d_id") == pytest.approx(2 / 8)
    assert rep.key_column_efficiency("w_id") == pytest.approx(4 / 8)
    assert rep.pim_efficiency == pytest.approx(8 / 24)
    with pytest.raises(LayoutError):
        rep.key_column_efficiency("zip")


def test_naive_single_wide_column_pads_other_devices():
    s = TableSchema("t", (ColumnSpec("k", 8, is_key=True),))
    lay = generate_naive_layout(s, geo())
    assert len(lay.parts) == 1
    assert lay.parts[0].row_width == 8
    assert lay.footprint_per_row == 32
    assert lay.padding_fraction == pytest.approx(24 / 32)


def test_naive_uniform_widths_have_zero_padding():
    s = TableSchema("t", tuple(ColumnSpec(n, 3) for n in "abce"))
    lay = generate_naive_layout(s, geo())
    assert len(lay.parts) == 1
    assert lay.parts[0].row_width == 3
    assert lay.padding_fraction == 0.0


# --- compact layout walkthrough ---


def test_compact_walkthrough_at_th_075():
    lay = generate_compact_layout(customer(), geo(), th=0.75)
    assert lay.kind == "compact" and lay.threshold == 0.75
    assert not lay.space_backstop
    assert len(lay.parts) == 2
    # widest key anchors part 0; no other key reaches 0.75 * 4 = 3 B,
    # so devices 1..3 take normal bytes instead
    assert slot_map(lay.parts[0]) == [
        ("credit", 0, 1, 3, 3),
        ("state", 0, 2, 3, 1),
        ("w_id", 0, 4, 0, 0),
        ("zip", 0, 4, 1, 0),
        ("zip", 4, 8, 2, 0),
        ("zip", 8, 9, 3, 0),
    ]
    # the two 2 B keys co-reside in part 1 (2 >= 0.75 * 2)
    assert slot_map(lay.parts[1]) == [
        ("credit", 1, 2, 2, 0),
        ("d_id", 0, 2, 1, 0),
        ("id", 0, 2, 0, 0),
    ]
    assert lay.footprint_per_row == 24
    assert lay.padding_fraction == pytest.approx(3 / 24)
    rep = effective_bandwidth(lay, geo())
    assert rep.cpu_efficiency == pytest.approx(21 / 24)
    # every key is as wide as its stride here, so streams are contiguous
    assert rep.pim_efficiency == pytest.approx(1.0)


def test_compact_th_zero_packs_keys_densely():
    lay = generate_compact_layout(customer(), geo(), th=0.0)
    p0 = lay.parts[0]
    placed = {s.column: s for s in p0.slots if s.column in ("id", "d_id", "w_id")}
    assert set(placed) == {"id", "d_id", "w_id"}
    assert all(s.offset == 0 for s in placed.values())
    assert len({s.device for s in placed.values()}) == 3
    # leftover stride space above the narrow keys is filled with normal bytes
    assert ("zip", 0, 2, 1, 2) in slot_map(p0)
    assert lay.padding_fraction == pytest.approx(3 / 24)


def test_compact_th_one_gives_every_key_a_full_stride():
    lay = generate_compact_layout(customer(), geo(), th=1.0)
    for name in ("id", "d_id", "w_id"):
        part, slot = lay.key_slot(name)
        assert slot.width == part.row_width
    rep = effective_bandwidth(lay, geo())
    assert rep.pim_efficiency == pytest.approx(1.0)


def test_compact_space_backstop_seats_deferred_keys():
    # a lone 1 B key below th strands 3 devices unless the backstop runs
    s = TableSchema("bs", (ColumnSpec("k1", 8, is_key=True),
                           ColumnSpec("k2", 1, is_key=True)))
    lay = generate_compact_layout(s, geo(), th=1.0)
    naive = generate_naive_layout(s, geo())
    assert lay.space_backstop
    assert len(lay.parts) == 1
    assert lay.padding_fraction <= naive.padding_fraction
    part, slot = lay.key_slot("k2")
    assert part.part_id == 0 and slot.device == 1


def test_compact_falls_back_to_naive_grouping_when_packing_loses():
    # with d=2 the seated-keys backstop still strands a device window: the
    # deferred 2 B key anchors its own part with nothing left to fill the
    # second device. The generator must then adopt the naive grouping.
    s = TableSchema("bs2", (ColumnSpec("c0", 1), ColumnSpec("c1", 1),
                            ColumnSpec("c2", 2, is_key=True),
                            ColumnSpec("c3", 3, is_key=True)))
    g = geo(2)
    lay = generate_compact_layout(s, g, th=1.0)
    naive = generate_naive_layout(s, g)
    assert lay.space_backstop
    assert lay.kind == "compact" and lay.threshold == 1.0
    assert lay.padding_fraction == naive.padding_fraction == pytest.approx(1 / 8)
    for col in ("c2", "c3"):
        part, slot = lay.key_slot(col)
        assert slot.width == s.column(col).width


def test_compact_threshold_range_checked():
    for th in (-0.1, 1.01):
        with pytest.raises(LayoutError):
            generate_compact_layout(customer(), geo(), th=th)


def test_column_wider_than_stride_cap_rejected():
    s = TableSchema("t", (ColumnSpec("blob", 256),))
    with pytest.raises(LayoutError):
        generate_compact_layout(s, geo())
    with pytest.raises(LayoutError):
        generate_naive_layout(s, geo())


def test_layout_validation_catches_missing_bytes():
    s = TableSchema("t", (ColumnSpec("a", 4),))
    part = PartLayout(0, 4, 4, (Slot("a", 0, 2, 0, 0),), 0, 0)
    with pytest.raises(LayoutError):
        TableLayout(s, (part,))


# --- block rotation and bank mapping ---


def rotated_layout(d=4, block_size=1024):
    s = TableSchema("t", (ColumnSpec("pad0", 4), ColumnSpec("pad1", 4),
                          ColumnSpec("k", 4, is_key=True), ColumnSpec("pad3", 4)))
    parts = (PartLayout(0, 4, d, tuple(
        Slot(c, 0, 4, dev, 0) for dev, c in
        enumerate(("pad0", "pad1", "k", "pad3")[:d])), 0, 0),)
    return TableLayout(s, parts, block_size=block_size)


def test_locate_rotates_by_block():
    lay = rotated_layout()
    # static device 2, row 1500 sits in block 1, so it rotates to device 3
    for b in locate(lay, 1500, "k"):
        assert b.device == 3
        assert b.part_id == 0
    first = locate(lay, 0, "k")[0]
    assert first.device == 2


def test_locate_local_offsets_are_stride_steps():
    lay = rotated_layout()
    for row in (0, 1, 7, 1023):
        bytes_ = locate(lay, row, "k")
        assert [b.col_byte for b in bytes_] == [0, 1, 2, 3]
        assert [b.local_offset for b in bytes_] == [row * 4 + j for j in range(4)]
        assert len({b.device for b in bytes_}) == 1


def test_locate_eight_blocks_touch_each_device_twice():
    lay = rotated_layout()
    hits = np.zeros(4, dtype=int)
    for block in range(8):
        dev = locate(lay, block * 1024, "k")[0].device
        hits[dev] += 1
    assert list(hits) == [2, 2, 2, 2]


@pytest.mark.parametrize("d", [2, 4, 8])
def test_block_rotation_balances_devices(d):
    s = TableSchema("t", (ColumnSpec("k", 4, is_key=True),))
    lay = generate_compact_layout(s, geo(d))
    for n in range(1, 65):
        devs = [locate(lay, b * lay.block_size, "k")[0].device for b in range(n)]
        counts = np.bincount(devs, minlength=d)
        assert counts.min() >= n // d
        assert counts.max() <= -(-n // d)


def test_bank_of_block_wraps_after_device_round():
    lay = rotated_layout()
    # blocks cycle devices first, then banks
    assert [bank_of_block(lay, b) for b in range(0, 9)] == [0, 0, 0, 0, 1, 1, 1, 1, 2]
    assert bank_of_block(lay, 4 * 8) == 0
    assert locate(lay, 0, "k")[0].bank == 0
    assert locate(lay, 5 * 1024, "k")[0].bank == 1


# --- random-schema invariants ---


schemas = st.builds(
    lambda widths, keys: TableSchema("t", tuple(
        ColumnSpec("c%d" % i, w, is_key=k)
        for i, (w, k) in enumerate(zip(widths, keys)))),
    st.lists(st.integers(1, 32), min_size=2, max_size=16),
    st.lists(st.booleans(), min_size=16, max_size=16),
)


@settings(max_examples=60, deadline=None)
@given(schema=schemas, th=st.sampled_from([0.0, 0.25, 0.6, 1.0]),
       d=st.sampled_from([2, 4, 8]))
def test_compact_invariants_on_random_schemas(schema, th, d):
    g = geo(d)
    lay = generate_compact_layout(schema, g, th=th)
    naive = generate_naive_layout(schema, g)
    # storage never worse than naive
    assert lay.padding_fraction <= naive.padding_fraction + 1e-12
    for part in lay.parts:
        for s in part.slots:
            assert 0 <= s.device < part.devices
            assert 0 <= s.offset and s.offset + s.width <= part.row_width
    for col in schema.key_columns:
        part, slot = lay.key_slot(col.name)
        assert slot.width == col.width
        # key bytes stay on one device with a fixed stride
        for row in (0, 3):
            bytes_ = locate(lay, row, col.name)
            assert len({b.device for b in bytes_}) == 1
            assert bytes_[0].local_offset == row * part.row_width + slot.offset
    # a row's bytes share the same stride window on every device
    for col in schema.columns:
        for b in locate(lay, 5, col.name):
            w = lay.parts[b.part_id].row_width
            assert 5 * w <= b.local_offset < 6 * w


@settings(max_examples=40, deadline=None)
@given(schema=schemas, th=st.floats(0.0, 1.0), d=st.sampled_from([4, 8]))
def test_compact_bijectivity(schema, th, d):
    lay = generate_compact_layout(schema, geo(d), th=th)
    seen = set()
    for part in lay.parts:
        for s in part.slots:
            for j in range(s.width):
                seen.add((s.column, s.col_lo + j))
    want = {(c.name, j) for c in schema.columns for j in range(c.width)}
    assert seen == want


# --- placed byte image ---


def test_placed_table_round_trip():
    lay = generate_compact_layout(customer(), geo(), th=0.6)
    placed = PlacedTable(lay, capacity_rows=2048)
    rng = np.random.default_rng(7)
    rows = np.arange(0, 2048, 3, dtype=np.int64)
    images = rng.integers(0, 256, size=(len(rows), 21), dtype=np.uint8)
    placed.write_rows(rows, images)
    assert np.array_equal(placed.read_rows(rows), images)
    # untouched rows stay zero
    assert not placed.read_row(1).any()


def test_placed_table_column_values_little_endian():
    lay = generate_compact_layout(customer(), geo(), th=0.6)
    placed = PlacedTable(lay, capacity_rows=1024)
    img = np.zeros(21, dtype=np.uint8)
    off = customer().column_offset("w_id")
    img[off:off + 4] = [0x78, 0x56, 0x34, 0x12]
    placed.write_row(9, img)
    vals = placed.column_values("w_id", rows=np.array([9], dtype=np.int64))
    assert int(vals[0]) == 0x12345678


def test_placed_table_grows_in_block_multiples():
    lay = generate_compact_layout(customer(), geo(), th=0.6)
    placed = PlacedTable(lay)
    placed.write_row(1500, np.zeros(21, dtype=np.uint8))
    assert placed.capacity == 2048
    assert placed.regions[0].shape[0] == lay.parts[0].devices


def test_placed_table_rejects_bad_image_width():
    lay = generate_compact_layout(customer(), geo(), th=0.6)
    placed = PlacedTable(lay, capacity_rows=1024)
    with pytest.raises(LayoutError):
        placed.write_row(0, np.zeros(20, dtype=np.uint8))


def test_split_column_values_reassemble():
    # zip is split across devices under the compact layout; only columns
    # up to 8 B can be read as integers, so check a split 8 B column
    s = TableSchema("t", (ColumnSpec("k", 6, is_key=True), ColumnSpec("v", 8)))
    lay = generate_compact_layout(s, geo(), th=0.6)
    assert len(lay.slots_for_column("v")) > 1
    placed = PlacedTable(lay, capacity_rows=1024)
    img = np.zeros(14, dtype=np.uint8)
    img[6:14] = range(1, 9)
    placed.write_row(4, img)
    got = int(placed.column_values("v", rows=np.array([4], dtype=np.int64))[0])
    assert got == int.from_bytes(bytes(range(1, 9)), "little")


# --- scan burst model ---


def test_column_scan_bursts_two_tiers():
    g = geo()
    full = Slot("k", 0, 4, 0, 0)
    part4 = PartLayout(0, 4, 4, (full,), 0, 0)
    assert column_scan_bursts(part4, full, 1000, g) == math.ceil(4000 / 8)
    narrow = Slot("k", 0, 2, 0, 0)
    part9 = PartLayout(0, 9, 4, (narrow, Slot("z", 0, 7, 0, 2)), 0, 0)
    assert column_scan_bursts(part9, narrow, 1000, g) == 1000


# --- serialization ---


def test_layout_save_load_round_trip(tmp_path):
    lay = generate_compact_layout(customer(), geo(), th=0.75)
    path = tmp_path / "customer.json"
    save_layout(path, lay)
    loaded = load_layout(path, customer())
    assert layout_to_dict(loaded) == layout_to_dict(lay)
    assert loaded.threshold == 0.75
    data = json.loads(path.read_text())
    assert data["table"] == "customer"
