"""Kernel selection: compiled extension when available, NumPy otherwise.

Set ``PIMHTAP_PURE=1`` in the environment to force the NumPy path (used by
the benchmark and by tests that compare the two implementations).
"""

import os

from . import fallback
from .fallback import OP_EQ, OP_GE, OP_GT, OP_LE, OP_LT, OP_NE

if os.environ.get("PIMHTAP_PURE"):
    _impl = fallback
    HAVE_COMPILED = False
else:
    try:
        from . import _core as _impl
        HAVE_COMPILED = True
    except ImportError:
        _impl = fallback
        HAVE_COMPILED = False

IMPL_NAME = "compiled" if HAVE_COMPILED else "numpy"

column_values = _impl.column_values
gather_rows = _impl.gather_rows
scatter_rows = _impl.scatter_rows
snapshot_apply = _impl.snapshot_apply
filter_mask = _impl.filter_mask

__all__ = [
    "HAVE_COMPILED", "IMPL_NAME", "fallback",
    "column_values", "gather_rows", "scatter_rows", "snapshot_apply", "filter_mask",
    "OP_EQ", "OP_NE", "OP_LT", "OP_GE", "OP_LE", "OP_GT",
]
