"""Desk-scale simulator for an HTAP storage engine on PIM-enabled DIMMs.

One instance keeps a single physical copy of each table in a unified,
device-interleaved layout that both the CPU (row-wise transactions) and
in-DIMM processing units (column-wise analytics) can stream efficiently.
Versioned updates, snapshot bitmaps, a cost-model defragmenter, and a
two-phase offload runtime are simulated against a closed-form memory
timing model.
"""

from ._kernels import HAVE_COMPILED, IMPL_NAME as KERNEL_BACKEND
from .defrag import (DefragParams, DefragReport, choose_strategy, comm_cpu_cost,
                     comm_pim_cost, defragment, explain_choice, measure,
                     pim_threshold_width)
from .errors import (ConflictError, DefragError, LayoutError, PimHtapError,
                     ProtocolError, QueryError, SchemaError, TransactionError)
from .experiments import (EXPERIMENT_NAMES, EXPERIMENTS, ExperimentConfig,
                          run_experiment, write_csv)
from .geometry import Geometry, load_geometry, save_geometry
from .layout import (BandwidthReport, PartLayout, PlacedTable, Slot,
                     TableLayout, bank_of_block, column_scan_bursts,
                     effective_bandwidth, generate_compact_layout,
                     generate_naive_layout, layout_to_dict, save_layout)
from .memory import Event, MemorySystem, SimClock
from .mvcc import (VERSION_META_BYTES, SnapshotBitmap, TableStore, Transaction,
                   VersionMeta)
from .queries import (Predicate, QueryPlan, QueryStats, ReferenceExecutor,
                      run_filter, run_filter_join_aggregate, run_filtered_sum,
                      run_group_aggregate, run_hash_join)
from .runtime import (REQUEST_SIZE, LaunchRequest, OffloadStats, OpType,
                      PimScheduler, decode_request, execute_aggregation,
                      execute_column_op, execute_join, hash64, run_two_phase)
from .schema import (ColumnSpec, Query, TableSchema, WorkloadSpec,
                     catalog_from_dict, catalog_to_dict, derive_key_columns,
                     load_catalog, save_catalog)
from .workload import (DeskDatabase, OltpStats, build_desk, desk_catalog,
                       desk_tables, desk_workload, run_oltp)

__version__ = "0.1.0"

__all__ = [
    "BandwidthReport", "ColumnSpec", "ConflictError", "DefragError",
    "DefragParams", "DefragReport", "DeskDatabase", "EXPERIMENTS",
    "EXPERIMENT_NAMES", "Event", "ExperimentConfig", "Geometry",
    "HAVE_COMPILED", "KERNEL_BACKEND", "LaunchRequest", "LayoutError",
    "MemorySystem", "OffloadStats", "OltpStats", "OpType", "PartLayout",
    "PimHtapError", "PimScheduler", "PlacedTable", "Predicate",
    "ProtocolError", "Query", "QueryError", "QueryPlan", "QueryStats",
    "REQUEST_SIZE", "ReferenceExecutor", "SchemaError", "SimClock", "Slot",
    "SnapshotBitmap", "TableLayout", "TableSchema", "TableStore",
    "Transaction", "TransactionError", "VERSION_META_BYTES", "VersionMeta",
    "WorkloadSpec", "bank_of_block", "build_desk", "catalog_from_dict",
    "catalog_to_dict", "choose_strategy", "column_scan_bursts",
    "comm_cpu_cost", "comm_pim_cost", "decode_request", "defragment",
    "derive_key_columns", "desk_catalog", "desk_tables", "desk_workload",
    "effective_bandwidth", "execute_aggregation", "execute_column_op",
    "execute_join", "explain_choice", "generate_compact_layout",
    "generate_naive_layout", "hash64", "layout_to_dict", "load_catalog",
    "load_geometry", "measure", "pim_threshold_width", "run_experiment",
    "run_filter", "run_filter_join_aggregate", "run_filtered_sum",
    "run_group_aggregate", "run_hash_join", "run_oltp", "run_two_phase",
    "save_catalog", "save_geometry", "save_layout", "write_csv",
]
