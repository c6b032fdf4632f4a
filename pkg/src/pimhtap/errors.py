"""Exception types shared across the package."""


class PimHtapError(Exception):
    """Base class for all package errors."""


class SchemaError(PimHtapError):
    """Invalid schema, workload, or catalog file."""


class LayoutError(PimHtapError):
    """Layout generation or addressing failure."""


class ProtocolError(PimHtapError):
    """Violation of the CPU/PIM bank-control or launch-request protocol."""


class TransactionError(PimHtapError):
    """Illegal transaction state transition."""


class ConflictError(TransactionError):
    """Write-write conflict: another transaction committed first."""


class DefragError(PimHtapError):
    """Defragmentation invoked in an illegal store state."""


class QueryError(PimHtapError):
    """Unsupported or malformed query request."""
