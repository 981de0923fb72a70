"""Log-only storage engine: the log is the database, indexed in memory."""

from .compaction import CompactionConfig, CompactionResult, SortedSegmentMeta
from .db import EngineConfig, LogStore
from .errors import (
    ChecksumError,
    CompactionError,
    ConflictError,
    KeyRangeError,
    LogStoreError,
    SchemaError,
    StorageFullError,
    StoreClosedError,
    TransactionStateError,
)
from .partition import WorkloadTrace, advise_partitioning
from .segment_store import LogAddress, StoreConfig, SyncPolicy
from .tablet import FIFOPolicy, LRUPolicy, TableSchema

__all__ = [
    "ChecksumError", "CompactionConfig", "CompactionError", "CompactionResult", "ConflictError",
    "EngineConfig", "FIFOPolicy", "KeyRangeError", "LRUPolicy", "LogAddress", "LogStore",
    "LogStoreError", "SchemaError", "SortedSegmentMeta", "StorageFullError", "StoreClosedError",
    "StoreConfig", "SyncPolicy", "TableSchema", "TransactionStateError", "WorkloadTrace",
    "advise_partitioning",
]
