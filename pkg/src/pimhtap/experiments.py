"""Experiment harness: trend studies over the desk workload, emitted as CSV.

Each experiment is a pure function of its config (seed included), returning
rows and a metadata document; ``run_experiment`` writes ``<name>.csv`` plus
``<name>.csv.meta.json`` into the output directory. Outputs carry no
timestamps, so a seeded run is byte-reproducible.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .defrag import defragment
from .errors import PimHtapError, SchemaError
from .geometry import Geometry, load_geometry
from .layout import effective_bandwidth, generate_compact_layout
from .mvcc import VERSION_META_BYTES
from .queries import (Predicate, run_filter_join_aggregate, run_filtered_sum,
                      run_group_aggregate)
from .runtime import PimScheduler
from .workload import DeskDatabase, build_desk, desk_catalog, run_oltp

CSV_VERSION = 1

EXPERIMENT_NAMES = ("th_sweep", "storage_breakdown", "oltp_time", "olap_time",
                    "frontier", "defrag_tradeoff", "wram_sweep")

DEFAULT_TH_VALUES = (0.0, 0.25, 0.5, 0.6, 0.75, 1.0)


@dataclass(frozen=True)
class ExperimentConfig:
    geometry: Geometry = Geometry()
    catalog_path: str | None = None
    th: float = 0.6
    th_values: tuple = DEFAULT_TH_VALUES
    block_size: int = 1024
    scale: float = 1.0
    seed: int = 0
    transactions: int = 2000
    tx_batch: int = 4
    snapshot_every: int = 200
    defrag_intervals: tuple = (250, 500, 1000, 2000, 4000, 8000)
    query_every: int = 500
    rates: tuple = (1, 2, 5, 10, 20, 50)
    frontier_transactions: int = 600
    wram_budgets: tuple = (4096, 8192, 16384, 32768)
    out_dir: str = "results"

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["geometry"] = self.geometry.to_dict()
        for name in ("th_values", "defrag_intervals", "rates", "wram_budgets"):
            doc[name] = list(doc[name])
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        geo = doc.pop("geometry", None)
        geo_path = doc.pop("geometry_path", None)
        if geo_path is not None:
            geometry = load_geometry(geo_path)
        elif isinstance(geo, dict):
            geometry = Geometry.from_dict(geo)
        else:
            geometry = Geometry()
        for name in ("th_values", "defrag_intervals", "rates", "wram_budgets"):
            if name in doc:
                doc[name] = tuple(doc[name])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise SchemaError("unknown config key(s): %s" % sorted(unknown))
        return cls(geometry=geometry, **doc)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def write_csv(path, rows: list[dict], meta: dict) -> None:
    if rows:
        fieldnames = list(rows[0])
    else:
        fieldnames = meta.get("columns", [])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(rows)
    with open(str(path) + ".meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def _meta(name: str, config: ExperimentConfig, **extra) -> dict:
    doc = {"csv_version": CSV_VERSION, "experiment": name,
           "config": config.to_dict()}
    doc.update(extra)
    return doc


# --- layout studies ---


def th_sweep(config: ExperimentConfig):
    """Padding and CPU/PIM effective bandwidth across the th knob."""
    geometry = config.geometry
    tables, _ = desk_catalog(config.scale)
    rows = []
    for th in config.th_values:
        cpu_useful = cpu_fetched = 0.0
        pim_useful = pim_fetched = 0.0
        pad = fp = 0.0
        for name, schema in sorted(tables.items()):
            layout = generate_compact_layout(schema, geometry, th, config.block_size)
            report = effective_bandwidth(layout, geometry)
            weight = schema.row_count
            t_fetch = sum(p["avg_lines_per_row"] for p in report.parts) \
                * geometry.cache_line_bytes
            cpu_useful += weight * schema.row_bytes
            cpu_fetched += weight * t_fetch
            for col, eff in report.key_columns:
                w = schema.column(col).width
                pim_useful += weight * w
                pim_fetched += weight * w / eff
            pad += weight * (layout.footprint_per_row - schema.row_bytes)
            fp += weight * layout.footprint_per_row
            rows.append({
                "th": th, "table": name,
                "padding_fraction": round(layout.padding_fraction, 6),
                "cpu_eff": round(report.cpu_efficiency, 6),
                "pim_eff": round(report.pim_efficiency, 6),
                "parts": len(layout.parts),
                "space_backstop": int(layout.space_backstop),
            })
        rows.append({
            "th": th, "table": "ALL",
            "padding_fraction": round(pad / fp, 6) if fp else 0.0,
            "cpu_eff": round(cpu_useful / cpu_fetched, 6) if cpu_fetched else 1.0,
            "pim_eff": round(pim_useful / pim_fetched, 6) if pim_fetched else 1.0,
            "parts": 0,
            "space_backstop": 0,
        })
    return rows, _meta("th_sweep", config)


def storage_breakdown(config: ExperimentConfig):
    """Bytes by purpose (payload, padding, bitmap copies) per table."""
    db = build_desk(config.geometry, config.th, config.seed, config.scale,
                    config.block_size, with_memory=False)
    rows = []
    totals = {"region_bytes": 0, "payload_capacity_bytes": 0,
              "padding_bytes": 0, "bitmap_bytes": 0.0}
    for name, store in sorted(db.stores.items()):
        b = store.storage_breakdown()
        rows.append({"table": name, **{k: b[k] for k in (
            "rows_data", "rows_delta", "region_bytes", "payload_capacity_bytes",
            "padding_bytes", "bitmap_bytes")},
            "padding_fraction": round(b["padding_fraction"], 6),
            "bitmap_fraction": round(b["bitmap_fraction"], 6)})
        for k in totals:
            totals[k] += b[k]
    region = totals["region_bytes"]
    rows.append({"table": "ALL", "rows_data": sum(r["rows_data"] for r in rows),
                 "rows_delta": sum(r["rows_delta"] for r in rows), **totals,
                 "padding_fraction": round(totals["padding_bytes"] / region, 6)
                 if region else 0.0,
                 "bitmap_fraction": round(totals["bitmap_bytes"] / region, 6)
                 if region else 0.0})
    return rows, _meta("storage_breakdown", config)


# --- transactional studies ---


def _span_lines(addr: int, nbytes: int, line: int = 64) -> int:
    if nbytes == 0:
        return 0
    return (addr + nbytes - 1) // line - addr // line + 1


def oltp_time(config: ExperimentConfig):
    """Same transaction stream billed under three physical layouts.

    The unified layout is simulated for real; the row-store and column-store
    numbers re-bill every committed row write under those layouts' line
    counts (row: one contiguous row image; column: one access per column).
    """
    from .layout import _row_lines
    db = build_desk(config.geometry, config.th, config.seed, config.scale,
                    config.block_size)
    rng = np.random.default_rng(config.seed + 1)
    base_log = {n: len(s.version_log) for n, s in db.stores.items()}
    stats = run_oltp(db, config.transactions, rng, config.tx_batch,
                     snapshot_every=0)
    line = config.geometry.cache_line_bytes
    lines = {"row_store": 0, "unified": 0, "column_store": 0}
    writes = 0
    for name, store in db.stores.items():
        schema = store.schema
        for v in store.version_log[base_log[name]:]:
            if v.tombstone:
                continue
            writes += 1
            region_row = v.pos
            lines["row_store"] += _span_lines(v.row * schema.row_bytes,
                                              schema.row_bytes, line)
            off = 0
            for col in schema.columns:
                lines["column_store"] += _span_lines(v.row * col.width, col.width, line)
                off += col.width
            lines["unified"] += sum(_row_lines(p, region_row, config.geometry)
                                    for p in store.layout.parts)
    bw = config.geometry.cpu_bandwidth
    rows = []
    for mode in ("row_store", "unified", "column_store"):
        n = lines[mode]
        rows.append({"mode": mode, "row_writes": writes, "lines": n,
                     "bytes": n * line,
                     "seconds": n * line / bw,
                     "ratio_vs_row_store": round(n / lines["row_store"], 6)
                     if lines["row_store"] else 1.0})
    meta = _meta("oltp_time", config, committed=stats.committed,
                 aborted=stats.aborted, simulated_elapsed=stats.elapsed)
    return rows, meta


# --- analytical studies ---


def _q1(db: DeskDatabase, scheduler: PimScheduler):
    store = db.stores["orderline"]
    snap = store.build_snapshot(store.last_commit_ts())
    return run_group_aggregate(store, "ol_quantity", "ol_amount", snap, scheduler)


def _q6(db: DeskDatabase, scheduler: PimScheduler):
    store = db.stores["orderline"]
    snap = store.build_snapshot(store.last_commit_ts())
    pred = Predicate("ol_quantity", "between", 10, 30)
    return run_filtered_sum(store, pred, "ol_amount", snap, scheduler)


def _q9(db: DeskDatabase, scheduler: PimScheduler):
    item = db.stores["item"]
    ol = db.stores["orderline"]
    at_ts = max(item.last_commit_ts(), ol.last_commit_ts())
    pred = Predicate("i_price", "between", 2000, 8000)
    return run_filter_join_aggregate(item, pred, "i_id", ol, "ol_i_id",
                                     "i_price", "ol_amount", scheduler, at_ts)


QUERIES = {"q1": _q1, "q6": _q6, "q9": _q9}
_QUERY_TABLES = {"q1": ("orderline",), "q6": ("orderline",),
                 "q9": ("item", "orderline")}


def _rebuild_bill(db: DeskDatabase, names, marks: dict,
                  metadata_bytes: int = VERSION_META_BYTES) -> float:
    """Bill a multi-instance style refresh: ship every new version + metadata."""
    total = 0
    for name in names:
        store = db.stores[name]
        n_new = len(store.version_log) - marks[name]
        marks[name] = len(store.version_log)
        if n_new:
            total += 2 * n_new * (store.row_bytes + metadata_bytes)
    if total and db.memory is not None:
        t0 = db.memory.clock.now
        db.memory.cpu_transfer(total, label="rebuild")
        return db.memory.clock.now - t0
    return 0.0


def olap_time(config: ExperimentConfig):
    """Per-query time split into consistency work and the scan itself.

    The unified design pays incremental snapshot maintenance; the rebuild
    baseline models a separate analytical instance that must receive all
    new-versioned rows (plus version metadata) before it can scan.
    """
    rows = []
    for mode in ("unified", "rebuild_baseline"):
        db = build_desk(config.geometry, config.th, config.seed, config.scale,
                        config.block_size)
        rng = np.random.default_rng(config.seed + 1)
        marks = {n: len(s.version_log) for n, s in db.stores.items()}
        run_oltp(db, config.transactions, rng, config.tx_batch)
        scheduler = PimScheduler(db.memory)
        for qname, qfn in sorted(QUERIES.items()):
            clock = db.memory.clock
            t0 = clock.now
            consistency = 0.0
            if mode == "rebuild_baseline":
                consistency += _rebuild_bill(db, _QUERY_TABLES[qname], marks)
            for tname in _QUERY_TABLES[qname]:
                store = db.stores[tname]
                store.build_snapshot(store.last_commit_ts())
            consistency = clock.now - t0
            t1 = clock.now
            _, stats = qfn(db, scheduler)
            scan = clock.now - t1
            blocked = sum(s.blocked_time for s in stats.offloads)
            rows.append({
                "mode": mode, "query": qname,
                "consistency_s": consistency,
                "scan_s": scan,
                "total_s": consistency + scan,
                "messages": stats.messages,
                "blocked_s": blocked,
            })
    return rows, _meta("olap_time", config)


def frontier(config: ExperimentConfig):
    """OLTP/OLAP throughput trade-off as transaction batches interleave scans."""
    rows = []
    for rate in config.rates:
        for mode in ("unified", "rebuild_baseline"):
            db = build_desk(config.geometry, config.th, config.seed,
                            config.scale, config.block_size)
            rng = np.random.default_rng(config.seed + 1)
            marks = {n: len(s.version_log) for n, s in db.stores.items()}
            scheduler = PimScheduler(db.memory)
            clock = db.memory.clock
            start = clock.now
            committed = 0
            queries = 0
            oltp_s = 0.0
            olap_s = 0.0
            while committed < config.frontier_transactions:
                t0 = clock.now
                stats = run_oltp(db, rate, rng, config.tx_batch)
                committed += stats.committed
                oltp_s += clock.now - t0
                t1 = clock.now
                if mode == "rebuild_baseline":
                    _rebuild_bill(db, _QUERY_TABLES["q6"], marks)
                _q6(db, scheduler)
                queries += 1
                olap_s += clock.now - t1
            elapsed = clock.now - start
            rows.append({
                "rate": rate, "mode": mode,
                "committed": committed, "queries": queries,
                "oltp_s": oltp_s, "olap_s": olap_s, "elapsed_s": elapsed,
                "oltp_throughput": committed / elapsed if elapsed else 0.0,
                "olap_throughput": queries / elapsed if elapsed else 0.0,
            })
    return rows, _meta("frontier", config)


def defrag_tradeoff(config: ExperimentConfig):
    """Defragmentation interval against fragmentation slowdown."""
    rows = []
    for interval in config.defrag_intervals:
        db = build_desk(config.geometry, config.th, config.seed, config.scale,
                        config.block_size)
        rng = np.random.default_rng(config.seed + 1)
        scheduler = PimScheduler(db.memory)
        clock = db.memory.clock
        committed = 0
        since_defrag = 0
        since_query = 0
        defrag_s = 0.0
        oltp_s = 0.0
        olap_s = 0.0
        defrags = 0
        queries = 0
        while committed < config.transactions:
            step = min(config.tx_batch, config.transactions - committed)
            t0 = clock.now
            stats = run_oltp(db, step, rng, config.tx_batch)
            oltp_s += clock.now - t0
            committed += stats.committed
            since_defrag += stats.committed
            since_query += stats.committed
            if since_query >= config.query_every:
                since_query = 0
                t1 = clock.now
                _q6(db, scheduler)
                olap_s += clock.now - t1
                queries += 1
            if since_defrag >= interval:
                since_defrag = 0
                t2 = clock.now
                for store in db.stores.values():
                    defragment(store, config.geometry)
                defrag_s += clock.now - t2
                defrags += 1
        rows.append({
            "interval": interval, "committed": committed,
            "defrags": defrags, "queries": queries,
            "defrag_s": defrag_s, "olap_s": olap_s, "oltp_s": oltp_s,
            "total_s": defrag_s + olap_s + oltp_s,
        })
    # fragmentation overhead = analytical slowdown against the best-maintained run
    best = min(r["olap_s"] for r in rows)
    for r in rows:
        r["frag_overhead_s"] = r["olap_s"] - best
    return rows, _meta("defrag_tradeoff", config)


def wram_sweep(config: ExperimentConfig):
    """Scan blocking and handover traffic as the WRAM operand budget varies."""
    rows = []
    for budget in config.wram_budgets:
        geometry = replace(config.geometry, wram_data_budget=budget)
        db = build_desk(geometry, config.th, config.seed, config.scale,
                        config.block_size)
        rng = np.random.default_rng(config.seed + 1)
        run_oltp(db, min(config.transactions, 200), rng, config.tx_batch)
        scheduler = PimScheduler(db.memory)
        _, qstats = _q6(db, scheduler)
        phases = sum(s.phases for s in qstats.offloads)
        handovers = sum(s.handover_ranks for s in qstats.offloads)
        blocked = sum(s.blocked_time for s in qstats.offloads)
        longest = max((e - s for st in qstats.offloads for s, e in st.blocked),
                      default=0.0)
        rows.append({
            "wram_data_budget": budget,
            "phases": phases,
            "handover_ranks": handovers,
            "blocked_s": blocked,
            "longest_block_s": longest,
            "messages": qstats.messages,
            "elapsed_s": qstats.elapsed,
        })
    return rows, _meta("wram_sweep", config)


EXPERIMENTS = {
    "th_sweep": th_sweep,
    "storage_breakdown": storage_breakdown,
    "oltp_time": oltp_time,
    "olap_time": olap_time,
    "frontier": frontier,
    "defrag_tradeoff": defrag_tradeoff,
    "wram_sweep": wram_sweep,
}


def run_experiment(name: str, config: ExperimentConfig) -> str:
    """Run one experiment and write its CSV; returns the CSV path."""
    try:
        fn = EXPERIMENTS[name]
    except KeyError:
        raise PimHtapError("unknown experiment %r (choose from %s)"
                           % (name, ", ".join(EXPERIMENT_NAMES))) from None
    rows, meta = fn(config)
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, name + ".csv")
    write_csv(path, rows, meta)
    return path
