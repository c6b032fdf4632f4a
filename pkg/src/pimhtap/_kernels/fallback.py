"""NumPy implementations of the hot kernels.

Same signatures and semantics as the compiled module; selection happens in
the package ``__init__``. All functions operate on one table part, whose
physical image is ``region``: a ``uint8[d, capacity * row_width]`` array,
one row of the array per memory device. Rows of block ``b`` live on device
``(static_dev + b) % d`` (block-circulant rotation), at byte offset
``row * row_width + offset`` within that device.
"""

from __future__ import annotations

import numpy as np

# filter comparison codes (operand is a single unsigned value)
OP_EQ, OP_NE, OP_LT, OP_GE, OP_LE, OP_GT = range(6)


def _device_of(rows, static_dev, block_size, d):
    return (static_dev + (rows // block_size)) % d


def column_values(region, rows, row_width, static_dev, offset, width, block_size):
    """Little-endian decode of a fixed-width field for the given rows."""
    if width > 8:
        raise ValueError("value decode supports widths up to 8 bytes")
    rows = np.asarray(rows, dtype=np.int64)
    d = region.shape[0]
    if len(rows) == 1:
        r = int(rows[0])
        dev = (static_dev + r // block_size) % d
        base = r * row_width + offset
        raw = bytes(region[dev][base:base + width])
        return np.array([int.from_bytes(raw, "little")], dtype=np.uint64)
    out = np.zeros(len(rows), dtype=np.uint64)
    devs = _device_of(rows, static_dev, block_size, d)
    base = rows * row_width + offset
    for dev in range(d):
        sel = np.nonzero(devs == dev)[0]
        if not len(sel):
            continue
        pos = base[sel]
        acc = np.zeros(len(sel), dtype=np.uint64)
        for k in range(width):
            byte = region[dev][pos + k].astype(np.uint64)
            acc |= byte << np.uint64(8 * k)
        out[sel] = acc
    return out


def gather_rows(region, rows, row_width, static_dev, offset, length, block_size,
                out, out_lo):
    """Copy one slot's bytes for the given rows into ``out[:, out_lo:out_lo+length]``."""
    rows = np.asarray(rows, dtype=np.int64)
    d = region.shape[0]
    if len(rows) == 1:
        r = int(rows[0])
        dev = (static_dev + r // block_size) % d
        base = r * row_width + offset
        out[0, out_lo:out_lo + length] = region[dev][base:base + length]
        return
    devs = _device_of(rows, static_dev, block_size, d)
    base = rows * row_width + offset
    span = np.arange(length, dtype=np.int64)
    for dev in range(d):
        sel = np.nonzero(devs == dev)[0]
        if not len(sel):
            continue
        out[sel, out_lo:out_lo + length] = region[dev][base[sel][:, None] + span]


def scatter_rows(region, rows, row_width, static_dev, offset, length, block_size,
                 src, src_lo):
    """Inverse of gather_rows: write ``src[:, src_lo:src_lo+length]`` into the region."""
    rows = np.asarray(rows, dtype=np.int64)
    d = region.shape[0]
    if len(rows) == 1:
        r = int(rows[0])
        dev = (static_dev + r // block_size) % d
        base = r * row_width + offset
        region[dev][base:base + length] = src[0, src_lo:src_lo + length]
        return
    devs = _device_of(rows, static_dev, block_size, d)
    base = rows * row_width + offset
    span = np.arange(length, dtype=np.int64)
    for dev in range(d):
        sel = np.nonzero(devs == dev)[0]
        if not len(sel):
            continue
        region[dev][base[sel][:, None] + span] = src[sel, src_lo:src_lo + length]


def snapshot_apply(data_bits, delta_bits, regions, positions, ops):
    """Apply bitmap updates in order.

    Order matters: a row updated twice inside one snapshot window first sets
    then clears the intermediate version's bit, so the entries cannot be
    applied as one vectorized write.
    """
    arrays = (data_bits, delta_bits)
    for i in range(len(positions)):
        arrays[regions[i]][positions[i]] = ops[i]


def filter_mask(values, vis, op_code, operand):
    """Visibility-masked comparison against one unsigned operand."""
    v = np.asarray(values, dtype=np.uint64)
    operand = np.uint64(operand)
    if op_code == OP_EQ:
        m = v == operand
    elif op_code == OP_NE:
        m = v != operand
    elif op_code == OP_LT:
        m = v < operand
    elif op_code == OP_GE:
        m = v >= operand
    elif op_code == OP_LE:
        m = v <= operand
    elif op_code == OP_GT:
        m = v > operand
    else:
        raise ValueError("unknown comparison code %r" % (op_code,))
    return (m & (np.asarray(vis, dtype=np.uint8) != 0)).astype(np.uint8)
