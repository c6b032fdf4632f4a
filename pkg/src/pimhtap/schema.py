"""Schema and workload catalog.

Tables are fixed-width: every column stores exactly ``width`` bytes in every
row. Whether a column is a *key* column (placed device-contiguously so PIM
units can scan it) is not an intrinsic property of the table; it is derived
from the analytical workload: a column is a key column iff at least one
analytical query scans it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .errors import SchemaError

QUERY_KINDS = ("filter", "aggregation", "join")


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    width: int
    is_key: bool = False

    def __post_init__(self):
        if not self.name:
            raise SchemaError("column name must be non-empty")
        if not isinstance(self.width, int) or self.width < 1:
            raise SchemaError("column %r: width must be a positive integer, got %r"
                              % (self.name, self.width))


@dataclass(frozen=True)
class TableSchema:
    name: str
    columns: tuple[ColumnSpec, ...]
    row_count: int = 0

    def __post_init__(self):
        if not self.name:
            raise SchemaError("table name must be non-empty")
        if not self.columns:
            raise SchemaError("table %r has no columns" % self.name)
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("table %r has duplicate column names" % self.name)
        if self.row_count < 0:
            raise SchemaError("table %r: row_count must be >= 0" % self.name)

    @property
    def row_bytes(self) -> int:
        """Payload bytes per row (no padding)."""
        return sum(c.width for c in self.columns)

    @property
    def key_columns(self) -> tuple[ColumnSpec, ...]:
        return tuple(c for c in self.columns if c.is_key)

    @property
    def normal_columns(self) -> tuple[ColumnSpec, ...]:
        return tuple(c for c in self.columns if not c.is_key)

    def column(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise SchemaError("table %r has no column %r" % (self.name, name))

    def column_index(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise SchemaError("table %r has no column %r" % (self.name, name))

    def column_offset(self, name: str) -> int:
        """Byte offset of the column within the contiguous logical row image."""
        off = 0
        for c in self.columns:
            if c.name == name:
                return off
            off += c.width
        raise SchemaError("table %r has no column %r" % (self.name, name))


@dataclass(frozen=True)
class Query:
    """One analytical query: which (table, column) pairs it scans."""

    query_id: str
    kind: str
    scans: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if self.kind not in QUERY_KINDS:
            raise SchemaError("query %r: unknown kind %r (expected one of %s)"
                              % (self.query_id, self.kind, ", ".join(QUERY_KINDS)))
        object.__setattr__(self, "scans", tuple((t, c) for t, c in self.scans))


@dataclass(frozen=True)
class WorkloadSpec:
    """Analytical query set plus the transactional mix driving updates."""

    queries: tuple[Query, ...] = ()
    transaction_mix: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "queries", tuple(self.queries))
        ids = [q.query_id for q in self.queries]
        if len(set(ids)) != len(ids):
            raise SchemaError("duplicate query ids in workload")
        mix = tuple((str(n), float(w)) for n, w in self.transaction_mix)
        for n, w in mix:
            if w < 0:
                raise SchemaError("transaction %r has negative weight" % n)
        object.__setattr__(self, "transaction_mix", mix)

    def scanned_columns(self, table: str) -> set[str]:
        cols = set()
        for q in self.queries:
            for t, c in q.scans:
                if t == table:
                    cols.add(c)
        return cols


def derive_key_columns(schema: TableSchema, workload: WorkloadSpec) -> TableSchema:
    """Return a copy of ``schema`` whose key flags follow the workload.

    A column is a key column iff some analytical query scans it. The result
    does not depend on the schema's incoming flags, so the derivation is
    idempotent; queries naming columns the table does not have are an error.
    """
    scanned = workload.scanned_columns(schema.name)
    known = {c.name for c in schema.columns}
    missing = scanned - known
    if missing:
        raise SchemaError("workload scans unknown column(s) %s of table %r"
                          % (sorted(missing), schema.name))
    cols = tuple(replace(c, is_key=c.name in scanned) for c in schema.columns)
    return replace(schema, columns=cols)


# --- catalog file format (JSON) ---
#
# {"tables": [{"name": ..., "row_count": N,
#              "columns": [{"name": ..., "width": W, "nullable": false}, ...]}],
#  "queries": [{"id": ..., "kind": "filter|aggregation|join",
#               "scans": [[table, column], ...]}],
#  "transaction_mix": [[name, weight], ...]}
#
# Widths are fixed; nullable columns would need variable-width encodings the
# unified layout does not support, so "nullable": true is rejected.


def catalog_to_dict(tables, workload: WorkloadSpec) -> dict:
    return {
        "tables": [
            {
                "name": t.name,
                "row_count": t.row_count,
                "columns": [
                    {"name": c.name, "width": c.width, "nullable": False}
                    for c in t.columns
                ],
            }
            for t in tables
        ],
        "queries": [
            {"id": q.query_id, "kind": q.kind, "scans": [list(s) for s in q.scans]}
            for q in workload.queries
        ],
        "transaction_mix": [list(m) for m in workload.transaction_mix],
    }


def catalog_from_dict(doc: dict) -> tuple[dict[str, TableSchema], WorkloadSpec]:
    if not isinstance(doc, dict):
        raise SchemaError("catalog document must be a JSON object")
    tables: dict[str, TableSchema] = {}
    for tdoc in doc.get("tables", []):
        cols = []
        for cdoc in tdoc.get("columns", []):
            if cdoc.get("nullable", False):
                raise SchemaError(
                    "column %r of table %r is nullable; only fixed-width "
                    "non-null columns are supported" % (cdoc.get("name"), tdoc.get("name")))
            width = cdoc.get("width")
            if not isinstance(width, int):
                raise SchemaError("column %r of table %r: width must be an integer"
                                  % (cdoc.get("name"), tdoc.get("name")))
            cols.append(ColumnSpec(cdoc["name"], width))
        schema = TableSchema(tdoc["name"], tuple(cols), int(tdoc.get("row_count", 0)))
        if schema.name in tables:
            raise SchemaError("duplicate table %r in catalog" % schema.name)
        tables[schema.name] = schema
    queries = []
    for qdoc in doc.get("queries", []):
        queries.append(Query(qdoc["id"], qdoc["kind"],
                             tuple((t, c) for t, c in qdoc.get("scans", []))))
    workload = WorkloadSpec(tuple(queries),
                            tuple((n, w) for n, w in doc.get("transaction_mix", [])))
    # cross-validate scan references and derive key flags
    for q in workload.queries:
        for t, c in q.scans:
            if t not in tables:
                raise SchemaError("query %r scans unknown table %r" % (q.query_id, t))
    tables = {name: derive_key_columns(t, workload) for name, t in tables.items()}
    return tables, workload


def load_catalog(path) -> tuple[dict[str, TableSchema], WorkloadSpec]:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError("catalog %s is not valid JSON: %s" % (path, exc)) from exc
    return catalog_from_dict(doc)


def save_catalog(path, tables, workload: WorkloadSpec) -> None:
    with open(path, "w") as f:
        json.dump(catalog_to_dict(tables, workload), f, indent=2, sort_keys=True)
        f.write("\n")
