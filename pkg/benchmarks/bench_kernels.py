"""Benchmark the compiled kernels against the NumPy fallback.

Runs every hot kernel on the same synthetic part image and reports the
best-of-N wall time per implementation plus the speedup. Works without the
compiled extension too (it then only reports the fallback numbers).

Usage:
    python3 benchmarks/bench_kernels.py [--rows 200000] [--repeats 5]
"""

import argparse
import time

import numpy as np

from pimhtap._kernels import OP_LT, fallback

try:
    from pimhtap._kernels import _core
except ImportError:
    _core = None


def build_inputs(rows, row_width, block_size, seed):
    rng = np.random.default_rng(seed)
    d = 8
    capacity = -(-rows // block_size) * block_size
    region = rng.integers(0, 256, size=(d, capacity * row_width), dtype=np.uint8)
    row_ids = rng.permutation(capacity).astype(np.int64)[:rows]
    values = fallback.column_values(region, row_ids, row_width, 0, 0, 4, block_size)
    vis = rng.integers(0, 2, size=rows, dtype=np.uint8)
    data_bits = np.zeros(capacity, dtype=np.uint8)
    delta_bits = np.zeros(capacity, dtype=np.uint8)
    regions = rng.integers(0, 2, size=rows, dtype=np.uint8)
    positions = rng.integers(0, capacity, size=rows, dtype=np.int64)
    ops = rng.integers(0, 2, size=rows, dtype=np.uint8)
    buf = np.zeros((rows, row_width), dtype=np.uint8)
    return {
        "region": region, "rows": row_ids, "row_width": row_width,
        "block_size": block_size, "values": values, "vis": vis,
        "data_bits": data_bits, "delta_bits": delta_bits,
        "regions": regions, "positions": positions, "ops": ops, "buf": buf,
    }


def make_cases(inp):
    rw = inp["row_width"]
    return [
        ("column_values", lambda impl: impl.column_values(
            inp["region"], inp["rows"], rw, 0, 0, 4, inp["block_size"])),
        ("gather_rows", lambda impl: impl.gather_rows(
            inp["region"], inp["rows"], rw, 2, 4, 8, inp["block_size"],
            inp["buf"], 0)),
        ("scatter_rows", lambda impl: impl.scatter_rows(
            inp["region"], inp["rows"], rw, 2, 4, 8, inp["block_size"],
            inp["buf"], 0)),
        ("snapshot_apply", lambda impl: impl.snapshot_apply(
            inp["data_bits"], inp["delta_bits"], inp["regions"],
            inp["positions"], inp["ops"])),
        ("filter_mask", lambda impl: impl.filter_mask(
            inp["values"], inp["vis"], OP_LT, 1 << 30)),
    ]


def best_of(fn, impl, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(impl)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=200_000)
    ap.add_argument("--row-width", type=int, default=24)
    ap.add_argument("--block-size", type=int, default=1024)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    inp = build_inputs(args.rows, args.row_width, args.block_size, args.seed)
    cases = make_cases(inp)

    if _core is not None:
        got = _core.column_values(inp["region"], inp["rows"], args.row_width,
                                  0, 0, 4, args.block_size)
        if not np.array_equal(got, inp["values"]):
            raise SystemExit("compiled column_values disagrees with fallback")

    print("rows=%d row_width=%d block_size=%d repeats=%d"
          % (args.rows, args.row_width, args.block_size, args.repeats))
    header = "%-16s %12s" % ("kernel", "numpy (ms)")
    if _core is not None:
        header += " %14s %9s" % ("compiled (ms)", "speedup")
    print(header)
    for name, fn in cases:
        base = best_of(fn, fallback, args.repeats)
        line = "%-16s %12.3f" % (name, 1e3 * base)
        if _core is not None:
            fast = best_of(fn, _core, args.repeats)
            line += " %14.3f %8.1fx" % (1e3 * fast, base / fast if fast else 0.0)
        print(line)
    if _core is None:
        print("compiled extension not importable; build it with"
              " 'pip install -e . --no-build-isolation'")


if __name__ == "__main__":
    main()
