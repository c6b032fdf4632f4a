"""Command line front end.

Subcommands:
  layout    plan and inspect table layouts for a catalog
  simulate  run the desk workload once and print a summary
  sweep     run one (or all) of the trend experiments, writing CSVs
  verify    self-check core components against reference oracles
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import experiments
from ._kernels import IMPL_NAME
from .defrag import DefragParams, choose_strategy, comm_cpu_cost, comm_pim_cost, \
    defragment, pim_threshold_width
from .errors import PimHtapError
from .experiments import EXPERIMENT_NAMES, ExperimentConfig
from .geometry import Geometry
from .layout import (effective_bandwidth, generate_compact_layout,
                     generate_naive_layout, layout_to_dict, locate)
from .mvcc import DATA
from .queries import (Predicate, ReferenceExecutor, run_filter,
                      run_group_aggregate)
from .runtime import FIELD_LAYOUT, LaunchRequest, PimScheduler, decode_request
from .schema import ColumnSpec, TableSchema, load_catalog
from .workload import build_desk, desk_catalog, run_oltp


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--th", type=float, help="override the co-residence threshold")
    p.add_argument("--out", help="override the output directory")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config \
        else ExperimentConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "th", None) is not None:
        over["th"] = args.th
    if getattr(args, "out", None) is not None:
        over["out_dir"] = args.out
    return dataclasses.replace(cfg, **over) if over else cfg


# --- layout ---


def cmd_layout(args) -> int:
    cfg = _load_config(args)
    if args.catalog:
        tables, _ = load_catalog(args.catalog)
    elif cfg.catalog_path:
        tables, _ = load_catalog(cfg.catalog_path)
    else:
        tables, _ = desk_catalog(cfg.scale)
    names = [args.table] if args.table else sorted(tables)
    for name in names:
        if name not in tables:
            print("no table named %r in the catalog" % name, file=sys.stderr)
            return 1
        schema = tables[name]
        layout = generate_compact_layout(schema, cfg.geometry, cfg.th,
                                         cfg.block_size)
        report = effective_bandwidth(layout, cfg.geometry)
        naive = generate_naive_layout(schema, cfg.geometry, cfg.block_size)
        print("table %s: %d columns, %d B/row" % (name, len(schema.columns),
                                                  schema.row_bytes))
        print("  compact: %d part(s), %d B footprint/row, padding %.2f%%"
              " (naive %.2f%%)%s"
              % (len(layout.parts), layout.footprint_per_row,
                 100 * layout.padding_fraction, 100 * naive.padding_fraction,
                 " [space backstop]" if layout.space_backstop else ""))
        for part in layout.parts:
            cols = ", ".join("%s@d%d" % (s.column, s.device) for s in part.slots)
            print("    part %d (ch%d rk%d): stride %d B, %s"
                  % (part.part_id, part.channel, part.rank, part.row_width, cols))
        print("  cpu efficiency %.3f, pim efficiency %.3f"
              % (report.cpu_efficiency, report.pim_efficiency))
        for col, eff in report.key_columns:
            print("    key %-14s streamed at %.3f of unit bandwidth" % (col, eff))
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            path = os.path.join(args.out, "%s.layout.json" % name)
            with open(path, "w") as f:
                json.dump(layout_to_dict(layout), f, indent=2)
                f.write("\n")
            print("  wrote %s" % path)
    return 0


# --- simulate ---


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    if args.transactions is not None:
        cfg = dataclasses.replace(cfg, transactions=args.transactions)
    db = build_desk(cfg.geometry, cfg.th, cfg.seed, cfg.scale, cfg.block_size)
    rng = np.random.default_rng(cfg.seed + 1)
    print("kernel backend: %s" % IMPL_NAME)
    print("loaded %d tables, %d rows total"
          % (len(db.stores), sum(s.row_count for s in db.stores.values())))
    stats = run_oltp(db, cfg.transactions, rng, cfg.tx_batch,
                     snapshot_every=cfg.snapshot_every)
    print("oltp: %d committed, %d aborted in %.3f ms simulated"
          " (%.0f tx/s simulated)"
          % (stats.committed, stats.aborted, 1e3 * stats.elapsed,
             stats.throughput))
    scheduler = PimScheduler(db.memory)
    for qname in sorted(experiments.QUERIES):
        t0 = db.memory.clock.now
        result, qstats = experiments.QUERIES[qname](db, scheduler)
        dt = db.memory.clock.now - t0
        size = len(result) if hasattr(result, "__len__") else 1
        blocked = sum(s.blocked_time for s in qstats.offloads)
        print("%s: %d result row(s) in %.3f ms simulated"
              " (%d messages, %.1f us cpu-blocked)"
              % (qname, size, 1e3 * dt, qstats.messages, 1e6 * blocked))
    t0 = db.memory.clock.now
    for name in sorted(db.stores):
        report = defragment(db.stores[name], cfg.geometry)
        if report.delta_versions:
            print("defrag %s: %d version(s) folded via %s in %.3f ms simulated"
                  % (name, report.delta_versions, report.strategy,
                     1e3 * report.elapsed))
    print("defrag total: %.3f ms simulated" % (1e3 * (db.memory.clock.now - t0)))
    cpu, pim = db.memory.stats["cpu"], db.memory.stats["pim"]
    print("bus totals: cpu %.1f MB billed, pim %.1f MB billed, "
          "%d handover(s), %d control message(s)"
          % (cpu.bytes_billed / 1e6, pim.bytes_billed / 1e6,
             db.memory.handovers, db.memory.control_messages))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "simulate.json")
        with open(path, "w") as f:
            json.dump({"committed": stats.committed, "aborted": stats.aborted,
                       "simulated_oltp_s": stats.elapsed,
                       "cpu_bytes_billed": cpu.bytes_billed,
                       "pim_bytes_billed": pim.bytes_billed,
                       "handovers": db.memory.handovers,
                       "control_messages": db.memory.control_messages,
                       "kernel_backend": IMPL_NAME}, f, indent=2, sort_keys=True)
            f.write("\n")
        print("wrote %s" % path)
    return 0


# --- sweep ---


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    names = list(EXPERIMENT_NAMES) if args.experiment == "all" else [args.experiment]
    for name in names:
        path = experiments.run_experiment(name, cfg)
        print("wrote %s" % path)
    return 0


# --- verify ---


def _check_layout_roundtrip(seed: int):
    rng = np.random.default_rng(seed)
    g = Geometry()
    for case in range(25):
        ncols = int(rng.integers(2, 20))
        cols = [ColumnSpec("c%d" % i, int(rng.integers(1, 33)),
                           is_key=bool(rng.integers(0, 2)))
                for i in range(ncols)]
        schema = TableSchema("t%d" % case, cols, row_count=64)
        layout = generate_compact_layout(schema, g, 0.6)
        naive = generate_naive_layout(schema, g)
        if layout.padding_fraction > naive.padding_fraction + 1e-12:
            return False, "case %d pads more than naive" % case
        seen = set()
        for part in layout.parts:
            for slot in part.slots:
                for b in range(slot.col_lo, slot.col_hi):
                    key = (slot.column, b)
                    if key in seen:
                        return False, "case %d places %s twice" % (case, key)
                    seen.add(key)
        want = {(c.name, b) for c in cols for b in range(c.width)}
        if seen != want:
            return False, "case %d lost column bytes" % case
    return True, "25 random schemas place every byte exactly once"


def _check_defrag_model(_seed: int):
    params = DefragParams(devices=8, row_width=4, metadata_bytes=16,
                          delta_rows=1e6, update_fraction=1.0,
                          cpu_bandwidth=1e9, pim_bandwidth=3e9)
    cpu, pim = comm_cpu_cost(params), comm_pim_cost(params)
    if abs(cpu - 0.08) > 1e-9 or abs(pim - 0.208) > 1e-9:
        return False, "cost model: got cpu=%.6f pim=%.6f" % (cpu, pim)
    w = pim_threshold_width(params)
    if w is None or abs(w - 16.0) > 1e-9:
        return False, "threshold: got %r, want 16.0" % w
    if choose_strategy(dataclasses.replace(params, row_width=16)) != "cpu":
        return False, "width 16 must stay on the cpu"
    if choose_strategy(dataclasses.replace(params, row_width=17)) != "pim":
        return False, "width 17 must offload"
    return True, "frozen costs 0.080/0.208 s and crossover at width 16"


def _check_request_codec(seed: int):
    rng = np.random.default_rng(seed)
    for op, spec in FIELD_LAYOUT.items():
        fields = {name: int.from_bytes(rng.bytes(size), "little")
                  for name, size in spec}
        req = LaunchRequest.make(op, **fields)
        raw = req.encode()
        if len(raw) != 64:
            return False, "%s encodes to %d bytes" % (op.name, len(raw))
        back = decode_request(raw)
        if back != req:
            return False, "%s does not round-trip" % op.name
    return True, "all %d op types round-trip through 64 B requests" % len(FIELD_LAYOUT)


def _check_rotation(_seed: int):
    g = Geometry()
    schema = TableSchema("r", [ColumnSpec("k", 4, is_key=True)], row_count=1)
    layout = generate_compact_layout(schema, g)
    d = layout.parts[0].devices
    for n_blocks in (1, 5, 16, 63):
        devs = [locate(layout, b * layout.block_size, "k")[0].device
                for b in range(n_blocks)]
        counts = np.bincount(devs, minlength=d)
        if counts.max() - counts.min() > 1:
            return False, "%d blocks spread %s across devices" % (n_blocks,
                                                                  counts.tolist())
    return True, "block rotation keeps per-device block counts within one"


def _check_queries(seed: int):
    db = build_desk(seed=seed, scale=0.05)
    rng = np.random.default_rng(seed)
    run_oltp(db, 50, rng)
    scheduler = PimScheduler(db.memory)
    oracle = ReferenceExecutor(db.stores)
    store = db.stores["orderline"]
    at_ts = store.last_commit_ts()
    snap = store.build_snapshot(at_ts)
    pred = Predicate("ol_quantity", "between", 10, 30)
    mask, _ = run_filter(store, pred, snap, scheduler)
    want = oracle.filter("orderline", pred, at_ts)
    if sorted(np.nonzero(mask)[0].tolist()) != want:
        return False, "filter disagrees with the chain-walking oracle"
    got, _ = run_group_aggregate(store, "ol_quantity", "ol_amount", snap, scheduler)
    if got != oracle.group_sum("orderline", "ol_quantity", "ol_amount", at_ts):
        return False, "group-sum disagrees with the chain-walking oracle"
    return True, "filter and group-sum match the chain-walking oracle"


def _check_snapshot(seed: int):
    db = build_desk(seed=seed, scale=0.05, with_memory=False)
    rng = np.random.default_rng(seed)
    run_oltp(db, 80, rng)
    oracle = ReferenceExecutor(db.stores)
    for name, store in db.stores.items():
        ts = store.last_commit_ts()
        snap = store.build_snapshot(ts)
        want = oracle.visible_version_positions(name, ts)
        for row, (region, pos) in want.items():
            bits = snap.data_bits if region == DATA else snap.delta_bits
            if pos >= len(bits) or not bits[pos]:
                return False, "%s row %d: visible version bit not set" % (name, row)
        total = int(snap.data_bits.sum()) + int(snap.delta_bits.sum())
        if total != len(want):
            return False, "%s sets %d bits, oracle sees %d rows" % (name, total, len(want))
    return True, "incremental bitmaps match a full chain walk on all tables"


def _check_defrag_semantics(seed: int):
    db = build_desk(seed=seed, scale=0.05)
    rng = np.random.default_rng(seed)
    run_oltp(db, 60, rng)
    oracle = ReferenceExecutor(db.stores)
    store = db.stores["item"]
    ts = store.last_commit_ts()
    before = oracle.visible_rows("item", ts)
    defragment(store, db.geometry)
    after = oracle.visible_rows("item", store.last_commit_ts())
    if set(before) != set(after) or any((before[r] != after[r]).any() for r in before):
        return False, "visible rows changed across defragmentation"
    again = defragment(store, db.geometry)
    if again.rows_copied != 0:
        return False, "second defrag still copied %d row(s)" % again.rows_copied
    return True, "defrag preserves visible rows and is idempotent"


VERIFY_CHECKS = [
    ("layout-placement", _check_layout_roundtrip),
    ("defrag-cost-model", _check_defrag_model),
    ("request-codec", _check_request_codec),
    ("block-rotation", _check_rotation),
    ("snapshot-bitmaps", _check_snapshot),
    ("query-oracles", _check_queries),
    ("defrag-semantics", _check_defrag_semantics),
]


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else 0
    failed = 0
    for name, fn in VERIFY_CHECKS:
        try:
            ok, detail = fn(seed)
        except PimHtapError as exc:
            ok, detail = False, "raised %s: %s" % (type(exc).__name__, exc)
        print("%s %-18s %s" % ("PASS" if ok else "FAIL", name, detail))
        failed += 0 if ok else 1
    if failed:
        print("%d check(s) failed" % failed)
        return 1
    print("all %d checks passed (kernel backend: %s)"
          % (len(VERIFY_CHECKS), IMPL_NAME))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pimhtap",
        description="simulate an HTAP storage engine on PIM-enabled memory")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("layout", help="plan table layouts for a catalog")
    _add_common(p)
    p.add_argument("--catalog", help="catalog JSON (defaults to the desk tables)")
    p.add_argument("--table", help="limit output to one table")
    p.set_defaults(fn=cmd_layout)

    p = sub.add_parser("simulate", help="run the desk workload once")
    _add_common(p)
    p.add_argument("--transactions", type=int, help="transaction count override")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("sweep", help="run trend experiments, writing CSVs")
    _add_common(p)
    p.add_argument("--experiment", default="all",
                   choices=list(EXPERIMENT_NAMES) + ["all"])
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("verify", help="self-check against reference oracles")
    _add_common(p)
    p.set_defaults(fn=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PimHtapError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
