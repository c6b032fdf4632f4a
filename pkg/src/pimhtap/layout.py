"""Unified data layout: one physical format serving row and column access.

A table is split into *parts*. A part owns ``d`` memory devices and stores a
fixed ``row_width`` byte stride per row on each device, so row ``r`` of a
part occupies the device-local window ``[r*row_width, (r+1)*row_width)`` on
every device. The CPU reads a whole row of a part with one interleaved
access (all devices in parallel); a PIM unit scans one device's stride
region locally.

Two generators build part maps:

* naive: one column per device, ``row_width`` = widest column of the part.
* compact: bin packing. The widest unplaced key column anchors a part and
  fixes its ``row_width``; other key columns at least ``th * row_width``
  wide occupy further devices (one each, device-contiguous); remaining
  bytes are filled with normal-column fragments, which may split across
  devices and parts. Leftover normal fragments form key-less parts.

Blocks of ``block_size`` rows rotate across the part's devices
(block-circulant placement), which load-balances single-column scans.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import LayoutError
from .geometry import Geometry
from .schema import TableSchema

DEFAULT_BLOCK_SIZE = 1024
# Strides and scan widths travel in one-byte request fields.
STRIDE_CAP = 255


@dataclass(frozen=True)
class Slot:
    """One placed byte range of a column inside a part.

    ``device`` is the static device index before block rotation; ``offset``
    is the byte position inside the per-row stride window.
    """

    column: str
    col_lo: int
    col_hi: int
    device: int
    offset: int

    @property
    def width(self) -> int:
        return self.col_hi - self.col_lo


@dataclass(frozen=True)
class PartLayout:
    part_id: int
    row_width: int
    devices: int
    slots: tuple[Slot, ...]
    channel: int = 0
    rank: int = 0

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(self.slots))
        fill = [[False] * self.row_width for _ in range(self.devices)]
        for s in self.slots:
            if not (0 <= s.device < self.devices):
                raise LayoutError("slot device out of range in part %d" % self.part_id)
            if not (0 <= s.offset and s.offset + s.width <= self.row_width):
                raise LayoutError("slot overflows the stride in part %d" % self.part_id)
            for b in range(s.offset, s.offset + s.width):
                if fill[s.device][b]:
                    raise LayoutError("overlapping slots in part %d" % self.part_id)
                fill[s.device][b] = True

    @property
    def footprint_per_row(self) -> int:
        """Physical bytes the part consumes per row, padding included."""
        return self.devices * self.row_width

    @property
    def data_bytes_per_row(self) -> int:
        return sum(s.width for s in self.slots)

    @property
    def padding_per_row(self) -> int:
        return self.footprint_per_row - self.data_bytes_per_row

    @property
    def data_density(self) -> float:
        return self.data_bytes_per_row / self.footprint_per_row

    def device_slots(self) -> list[list[Slot]]:
        per_dev: list[list[Slot]] = [[] for _ in range(self.devices)]
        for s in self.slots:
            per_dev[s.device].append(s)
        for lst in per_dev:
            lst.sort(key=lambda s: s.offset)
        return per_dev


class PhysicalByte(NamedTuple):
    col_byte: int
    part_id: int
    device: int
    bank: int
    local_offset: int


@dataclass(frozen=True)
class TableLayout:
    schema: TableSchema
    parts: tuple[PartLayout, ...]
    block_size: int = DEFAULT_BLOCK_SIZE
    banks_per_device: int = 8
    kind: str = "compact"
    threshold: float = 0.0
    space_backstop: bool = False

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        if self.block_size < 1:
            raise LayoutError("block_size must be >= 1")
        placed: dict[str, list[tuple[int, int]]] = {c.name: [] for c in self.schema.columns}
        for p in self.parts:
            for s in p.slots:
                if s.column not in placed:
                    raise LayoutError("slot names unknown column %r" % s.column)
                placed[s.column].append((s.col_lo, s.col_hi))
        for col in self.schema.columns:
            ranges = sorted(placed[col.name])
            pos = 0
            for lo, hi in ranges:
                if lo != pos:
                    raise LayoutError("column %r has a gap or overlap at byte %d"
                                      % (col.name, pos))
                pos = hi
            if pos != col.width:
                raise LayoutError("column %r: %d of %d bytes placed"
                                  % (col.name, pos, col.width))

    @property
    def footprint_per_row(self) -> int:
        return sum(p.footprint_per_row for p in self.parts)

    @property
    def data_bytes_per_row(self) -> int:
        return self.schema.row_bytes

    @property
    def padding_fraction(self) -> float:
        return 1.0 - self.data_bytes_per_row / self.footprint_per_row

    def part(self, part_id: int) -> PartLayout:
        return self.parts[part_id]

    def slots_for_column(self, column: str) -> list[tuple[PartLayout, Slot]]:
        self.schema.column(column)  # raises on unknown name
        found = []
        for p in self.parts:
            for s in p.slots:
                if s.column == column:
                    found.append((p, s))
        found.sort(key=lambda ps: ps[1].col_lo)
        return found

    def key_slot(self, column: str) -> tuple[PartLayout, Slot]:
        """The single device-contiguous slot of a key column."""
        spec = self.schema.column(column)
        if not spec.is_key:
            raise LayoutError("column %r is not a key column" % column)
        pairs = self.slots_for_column(column)
        if len(pairs) != 1:
            raise LayoutError("key column %r is split across slots" % column)
        return pairs[0]


def bank_of_block(layout: TableLayout, block: int) -> int:
    """Bank index a block occupies (same on every device of the part)."""
    d = layout.parts[0].devices if layout.parts else 1
    return (block // d) % layout.banks_per_device


def locate(layout: TableLayout, row: int, column: str) -> list[PhysicalByte]:
    """Physical address of every byte of ``column`` in logical row ``row``."""
    if row < 0:
        raise LayoutError("row must be >= 0")
    block = row // layout.block_size
    bank = bank_of_block(layout, block)
    out = []
    for part, slot in layout.slots_for_column(column):
        device = (slot.device + block) % part.devices
        base = row * part.row_width + slot.offset
        for j in range(slot.width):
            out.append(PhysicalByte(slot.col_lo + j, part.part_id, device, bank, base + j))
    return out


# --- generators ---


def _check_widths(schema: TableSchema):
    for c in schema.columns:
        if c.width > STRIDE_CAP:
            raise LayoutError("column %r is %d B wide; the per-device stride "
                              "limit is %d B" % (c.name, c.width, STRIDE_CAP))


def _part_place(d: int, parts: list, geometry: Geometry):
    """Channel/rank assignment for the next part (round robin)."""
    i = len(parts)
    channel = i % geometry.channels
    rank = (i // geometry.channels) % geometry.ranks_per_channel
    return channel, rank


def generate_naive_layout(schema: TableSchema, geometry: Geometry,
                          block_size: int = DEFAULT_BLOCK_SIZE) -> TableLayout:
    """One column per device, declaration order, padded to the widest."""
    _check_widths(schema)
    d = geometry.devices_per_rank
    parts: list[PartLayout] = []
    cols = list(schema.columns)
    for lo in range(0, len(cols), d):
        group = cols[lo:lo + d]
        w = max(c.width for c in group)
        slots = [Slot(c.name, 0, c.width, dev, 0) for dev, c in enumerate(group)]
        channel, rank = _part_place(d, parts, geometry)
        parts.append(PartLayout(len(parts), w, d, tuple(slots), channel, rank))
    return TableLayout(schema, tuple(parts), block_size,
                       geometry.banks_per_device, kind="naive")


class _Fragments:
    """Normal-column bytes awaiting placement, in declaration order."""

    def __init__(self, columns):
        self.queue = [[c.name, 0, c.width] for c in columns]

    def __bool__(self):
        return bool(self.queue)

    @property
    def total(self) -> int:
        return sum(hi - lo for _, lo, hi in self.queue)

    @property
    def widest(self) -> int:
        return max(hi - lo for _, lo, hi in self.queue)

    def take(self, limit: int):
        """Consume up to ``limit`` bytes from the head fragment."""
        name, lo, hi = self.queue[0]
        n = min(limit, hi - lo)
        if lo + n == hi:
            self.queue.pop(0)
        else:
            self.queue[0][1] = lo + n
        return name, lo, lo + n


def _build_compact(schema: TableSchema, geometry: Geometry, th: float,
                   block_size: int, backstop: bool) -> TableLayout:
    d = geometry.devices_per_rank
    keys = sorted(schema.key_columns,
                  key=lambda c: (-c.width, schema.column_index(c.name)))
    frags = _Fragments(schema.normal_columns)
    parts: list[PartLayout] = []
    while keys or frags:
        slots: list[Slot] = []
        if keys:
            anchor = keys.pop(0)
            w = anchor.width
            fill = [0] * d
            slots.append(Slot(anchor.name, 0, anchor.width, 0, 0))
            fill[0] = anchor.width
            dev = 1
            # step 2: co-resident key columns, widest first, one per device
            while dev < d and keys and keys[0].width >= th * w:
                k = keys.pop(0)
                slots.append(Slot(k.name, 0, k.width, dev, 0))
                fill[dev] = k.width
                dev += 1
            # step 3: byte-greedy fill with normal fragments
            for dv in range(d):
                while fill[dv] < w and frags:
                    name, lo, hi = frags.take(w - fill[dv])
                    slots.append(Slot(name, lo, hi, dv, fill[dv]))
                    fill[dv] += hi - lo
            if backstop:
                # No normal bytes remain but stride space does: admit deferred
                # key columns below the threshold rather than pad.
                remaining = []
                for k in keys:
                    placed = False
                    for dv in range(d):
                        if w - fill[dv] >= k.width:
                            slots.append(Slot(k.name, 0, k.width, dv, fill[dv]))
                            fill[dv] += k.width
                            placed = True
                            break
                    if not placed:
                        remaining.append(k)
                keys = remaining
        else:
            # key-less fallback: split normal fragments freely, minimising
            # padding (the last part is the only one that can pad)
            total = frags.total
            w = min(frags.widest, math.ceil(total / d), STRIDE_CAP)
            w = max(w, 1)
            fill = [0] * d
            for dv in range(d):
                while fill[dv] < w and frags:
                    name, lo, hi = frags.take(w - fill[dv])
                    slots.append(Slot(name, lo, hi, dv, fill[dv]))
                    fill[dv] += hi - lo
        channel, rank = _part_place(d, parts, geometry)
        parts.append(PartLayout(len(parts), w, d, tuple(slots), channel, rank))
    return TableLayout(schema, tuple(parts), block_size, geometry.banks_per_device,
                       kind="compact", threshold=th, space_backstop=backstop)


def generate_compact_layout(schema: TableSchema, geometry: Geometry,
                            th: float = 0.6,
                            block_size: int = DEFAULT_BLOCK_SIZE) -> TableLayout:
    """Bin-packed layout; ``th`` trades PIM scan density against CPU density.

    Deferring a below-threshold key column can strand stride space when few
    normal bytes exist to fill it. If the strict packing pads more than the
    naive layout would, the generator reruns with a backstop pass that seats
    deferred key columns in otherwise-padded space. Should even that pad
    more (a narrow deferred key can end up alone in its own part while the
    naive grouping shares a cheap stride), the naive grouping itself is
    adopted, which makes the "never worse than naive" storage guarantee
    unconditional.
    """
    if not (0.0 <= th <= 1.0):
        raise LayoutError("th must lie in [0, 1]")
    _check_widths(schema)
    strict = _build_compact(schema, geometry, th, block_size, backstop=False)
    naive = generate_naive_layout(schema, geometry, block_size)
    if strict.padding_fraction <= naive.padding_fraction:
        return strict
    packed = _build_compact(schema, geometry, th, block_size, backstop=True)
    if packed.padding_fraction <= naive.padding_fraction:
        return packed
    return dataclasses.replace(naive, kind="compact", threshold=th,
                               space_backstop=True)


# --- access-efficiency model ---


@dataclass(frozen=True)
class BandwidthReport:
    cpu_efficiency: float
    pim_efficiency: float
    parts: tuple[dict, ...]
    key_columns: tuple[tuple[str, float], ...]

    def key_column_efficiency(self, column: str) -> float:
        for name, eff in self.key_columns:
            if name == column:
                return eff
        raise LayoutError("no key column %r in report" % column)


def _row_lines(part: PartLayout, row: int, geometry: Geometry) -> int:
    """Cache lines one interleaved row access of this part touches."""
    g = geometry.interleave_granularity
    line = geometry.cache_line_bytes
    chunk_lo = (row * part.row_width) // g
    chunk_hi = ((row + 1) * part.row_width - 1) // g
    phys_lo = chunk_lo * g * part.devices
    phys_hi = (chunk_hi + 1) * g * part.devices - 1
    return phys_hi // line - phys_lo // line + 1


def effective_bandwidth(layout: TableLayout, geometry: Geometry) -> BandwidthReport:
    """Useful-byte fractions for row-wise CPU and column-wise PIM access.

    CPU: a row-wise scan of a part is billed in whole cache lines. Over the
    shortest row period whose byte span is a whole number of lines the scan
    touches every line exactly once, so the amortised fetch per row is the
    part footprint itself, and the period makes that exact rather than a
    limit. PIM: a unit streams a key column out of its stride region in 8 B
    bursts. A column as wide as its stride is a contiguous stream; a
    narrower column pays ``ceil(width / 8)`` bursts per row.
    """
    g = geometry.interleave_granularity
    B = layout.block_size
    cpu_useful = cpu_fetched = 0.0
    part_stats = []
    for part in layout.parts:
        line = geometry.cache_line_bytes
        lines = part.footprint_per_row / line
        fetched = part.footprint_per_row
        useful = part.data_bytes_per_row
        cpu_useful += useful
        cpu_fetched += fetched
        part_stats.append({
            "part_id": part.part_id,
            "row_width": part.row_width,
            "devices": part.devices,
            "data_bytes_per_row": useful,
            "footprint_per_row": part.footprint_per_row,
            "data_density": part.data_density,
            "avg_lines_per_row": lines,
        })
    pim_useful = pim_fetched = 0.0
    key_effs = []
    for col in layout.schema.key_columns:
        part, slot = layout.key_slot(col.name)
        useful = slot.width * B
        if slot.width == part.row_width:
            fetched = math.ceil(B * slot.width / g) * g
        else:
            fetched = B * math.ceil(slot.width / g) * g
        pim_useful += useful
        pim_fetched += fetched
        key_effs.append((col.name, useful / fetched))
    cpu_eff = cpu_useful / cpu_fetched if cpu_fetched else 1.0
    pim_eff = pim_useful / pim_fetched if pim_fetched else 1.0
    return BandwidthReport(cpu_eff, pim_eff, tuple(part_stats), tuple(key_effs))


def column_scan_bursts(part: PartLayout, slot: Slot, rows: int,
                       geometry: Geometry) -> int:
    """8 B bursts a PIM unit fetches to scan ``rows`` rows of one slot."""
    g = geometry.interleave_granularity
    if slot.width == part.row_width:
        return math.ceil(rows * slot.width / g)
    return rows * math.ceil(slot.width / g)


# --- placed byte image ---


class PlacedTable:
    """Physical byte image of one table region under a layout.

    Storage is one ``uint8[d, capacity * row_width]`` array per part. The
    image only holds bytes; versioning and visibility live in the MVCC
    store on top of it.
    """

    def __init__(self, layout: TableLayout, capacity_rows: int = 0):
        self.layout = layout
        self.capacity = 0
        self.regions: list[np.ndarray] = [
            np.zeros((p.devices, 0), dtype=np.uint8) for p in layout.parts
        ]
        # per part: (static_dev, stride offset, logical row-image offset, length)
        self.segments: list[list[tuple[int, int, int, int]]] = []
        for p in layout.parts:
            segs = []
            for s in p.slots:
                logical = layout.schema.column_offset(s.column) + s.col_lo
                segs.append((s.device, s.offset, logical, s.width))
            self.segments.append(segs)
        if capacity_rows:
            self.ensure_capacity(capacity_rows)

    @property
    def row_bytes(self) -> int:
        return self.layout.schema.row_bytes

    def ensure_capacity(self, rows: int) -> None:
        B = self.layout.block_size
        need = ((rows + B - 1) // B) * B
        if need <= self.capacity:
            return
        for i, p in enumerate(self.layout.parts):
            grown = np.zeros((p.devices, need * p.row_width), dtype=np.uint8)
            if self.capacity:
                grown[:, :self.capacity * p.row_width] = self.regions[i]
            self.regions[i] = grown
        self.capacity = need

    def write_rows(self, rows, images) -> None:
        rows = np.asarray(rows, dtype=np.int64)
        images = np.ascontiguousarray(images, dtype=np.uint8)
        if images.ndim != 2 or images.shape[1] != self.row_bytes:
            raise LayoutError("row image must be %d bytes wide" % self.row_bytes)
        if len(rows) and rows.max() >= self.capacity:
            self.ensure_capacity(int(rows.max()) + 1)
        for part, segs in zip(self.layout.parts, self.segments):
            region = self.regions[part.part_id]
            for dev, off, logical, length in segs:
                _kernels.scatter_rows(region, rows, part.row_width, dev, off,
                                      length, self.layout.block_size, images, logical)

    def read_rows(self, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        out = np.zeros((len(rows), self.row_bytes), dtype=np.uint8)
        for part, segs in zip(self.layout.parts, self.segments):
            region = self.regions[part.part_id]
            for dev, off, logical, length in segs:
                _kernels.gather_rows(region, rows, part.row_width, dev, off,
                                     length, self.layout.block_size, out, logical)
        return out

    def write_row(self, row: int, image) -> None:
        self.write_rows(np.array([row], dtype=np.int64),
                        np.asarray(image, dtype=np.uint8).reshape(1, -1))

    def read_row(self, row: int) -> np.ndarray:
        return self.read_rows(np.array([row], dtype=np.int64))[0]

    def column_values(self, column: str, rows=None) -> np.ndarray:
        """Unsigned little-endian values of a column (width <= 8 B)."""
        spec = self.layout.schema.column(column)
        if spec.width > 8:
            raise LayoutError("column %r is wider than 8 B" % column)
        if rows is None:
            rows = np.arange(self.capacity, dtype=np.int64)
        else:
            rows = np.asarray(rows, dtype=np.int64)
        pairs = self.layout.slots_for_column(column)
        if len(pairs) == 1:
            part, slot = pairs[0]
            return _kernels.column_values(self.regions[part.part_id], rows,
                                          part.row_width, slot.device, slot.offset,
                                          slot.width, self.layout.block_size)
        # split column: assemble bytes first
        scratch = np.zeros((len(rows), spec.width), dtype=np.uint8)
        for part, slot in pairs:
            _kernels.gather_rows(self.regions[part.part_id], rows, part.row_width,
                                 slot.device, slot.offset, slot.width,
                                 self.layout.block_size, scratch, slot.col_lo)
        weights = (np.uint64(1) << (np.uint64(8) * np.arange(spec.width, dtype=np.uint64)))
        return scratch.astype(np.uint64) @ weights


def relayout_row(placed: PlacedTable, row: int, image) -> None:
    """Scatter a contiguous logical row image into the placed format."""
    placed.write_row(row, image)


def extract_row(placed: PlacedTable, row: int) -> np.ndarray:
    """Gather the contiguous logical row image back out of the placed format."""
    return placed.read_row(row)


# --- serialization ---


def layout_to_dict(layout: TableLayout) -> dict:
    return {
        "table": layout.schema.name,
        "kind": layout.kind,
        "threshold": layout.threshold,
        "block_size": layout.block_size,
        "banks_per_device": layout.banks_per_device,
        "space_backstop": layout.space_backstop,
        "padding_fraction": layout.padding_fraction,
        "parts": [
            {
                "part_id": p.part_id,
                "row_width": p.row_width,
                "devices": p.devices,
                "channel": p.channel,
                "rank": p.rank,
                "slots": [
                    {"column": s.column, "col_lo": s.col_lo, "col_hi": s.col_hi,
                     "device": s.device, "offset": s.offset}
                    for s in p.slots
                ],
            }
            for p in layout.parts
        ],
    }


def save_layout(path, layout: TableLayout) -> None:
    with open(path, "w") as f:
        json.dump(layout_to_dict(layout), f, indent=2)
        f.write("\n")


def layout_from_dict(data: dict, schema: TableSchema) -> TableLayout:
    if data.get("table") != schema.name:
        raise LayoutError("layout is for table %r, not %r"
                          % (data.get("table"), schema.name))
    parts = []
    for p in data["parts"]:
        slots = tuple(Slot(s["column"], s["col_lo"], s["col_hi"],
                           s["device"], s["offset"]) for s in p["slots"])
        parts.append(PartLayout(p["part_id"], p["row_width"], p["devices"],
                                slots, p["channel"], p["rank"]))
    return TableLayout(schema, tuple(parts),
                       block_size=data.get("block_size", DEFAULT_BLOCK_SIZE),
                       banks_per_device=data.get("banks_per_device", 8),
                       kind=data.get("kind", "compact"),
                       threshold=data.get("threshold", 0.0),
                       space_backstop=data.get("space_backstop", False))


def load_layout(path, schema: TableSchema) -> TableLayout:
    with open(path) as f:
        return layout_from_dict(json.load(f), schema)
