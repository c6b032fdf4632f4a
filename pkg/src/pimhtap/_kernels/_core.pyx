# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the fallback kernels (see fallback.py for semantics)."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

OP_EQ, OP_NE, OP_LT, OP_GE, OP_LE, OP_GT = range(6)


def column_values(cnp.uint8_t[:, ::1] region, rows, long row_width,
                  long static_dev, long offset, long width, long block_size):
    if width > 8:
        raise ValueError("value decode supports widths up to 8 bytes")
    cdef cnp.int64_t[::1] r = np.ascontiguousarray(rows, dtype=np.int64)
    cdef long n = r.shape[0]
    cdef long d = region.shape[0]
    out_arr = np.zeros(n, dtype=np.uint64)
    cdef cnp.uint64_t[::1] out = out_arr
    cdef long i, k, dev
    cdef cnp.int64_t pos
    cdef cnp.uint64_t acc
    for i in range(n):
        dev = (static_dev + r[i] // block_size) % d
        pos = r[i] * row_width + offset
        acc = 0
        for k in range(width):
            acc |= (<cnp.uint64_t> region[dev, pos + k]) << (8 * k)
        out[i] = acc
    return out_arr


def gather_rows(cnp.uint8_t[:, ::1] region, rows, long row_width, long static_dev,
                long offset, long length, long block_size,
                cnp.uint8_t[:, ::1] out, long out_lo):
    cdef cnp.int64_t[::1] r = np.ascontiguousarray(rows, dtype=np.int64)
    cdef long n = r.shape[0]
    cdef long d = region.shape[0]
    cdef long i, k, dev
    cdef cnp.int64_t pos
    for i in range(n):
        dev = (static_dev + r[i] // block_size) % d
        pos = r[i] * row_width + offset
        for k in range(length):
            out[i, out_lo + k] = region[dev, pos + k]


def scatter_rows(cnp.uint8_t[:, ::1] region, rows, long row_width, long static_dev,
                 long offset, long length, long block_size,
                 cnp.uint8_t[:, ::1] src, long src_lo):
    cdef cnp.int64_t[::1] r = np.ascontiguousarray(rows, dtype=np.int64)
    cdef long n = r.shape[0]
    cdef long d = region.shape[0]
    cdef long i, k, dev
    cdef cnp.int64_t pos
    for i in range(n):
        dev = (static_dev + r[i] // block_size) % d
        pos = r[i] * row_width + offset
        for k in range(length):
            region[dev, pos + k] = src[i, src_lo + k]


def snapshot_apply(cnp.uint8_t[::1] data_bits, cnp.uint8_t[::1] delta_bits,
                   cnp.uint8_t[::1] regions, cnp.int64_t[::1] positions,
                   cnp.uint8_t[::1] ops):
    cdef long i
    for i in range(positions.shape[0]):
        if regions[i] == 0:
            data_bits[positions[i]] = ops[i]
        else:
            delta_bits[positions[i]] = ops[i]


def filter_mask(values, vis, long op_code, operand):
    cdef cnp.uint64_t[::1] v = np.ascontiguousarray(values, dtype=np.uint64)
    cdef cnp.uint8_t[::1] m = np.ascontiguousarray(vis, dtype=np.uint8)
    cdef long n = v.shape[0]
    out_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] out = out_arr
    cdef cnp.uint64_t op = <cnp.uint64_t> operand
    cdef long i
    cdef bint hit
    for i in range(n):
        if op_code == 0:
            hit = v[i] == op
        elif op_code == 1:
            hit = v[i] != op
        elif op_code == 2:
            hit = v[i] < op
        elif op_code == 3:
            hit = v[i] >= op
        elif op_code == 4:
            hit = v[i] <= op
        elif op_code == 5:
            hit = v[i] > op
        else:
            raise ValueError("unknown comparison code %r" % op_code)
        out[i] = 1 if (hit and m[i] != 0) else 0
    return out_arr
