"""The engine: one log shared by every tablet of every table in a directory.

Directory layout::

    catalog.json        table schemas
    log/                segment files (see segment_store)
    index/              persisted index files
    checkpoints/        checkpoint blocks; CHECKPOINT names the current one
    compaction/         sorted-segment metadata files
"""

from __future__ import annotations

import bisect
import json
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Iterator, Optional

from .errors import SchemaError, StoreClosedError
from .segment_store import SegmentStore, StoreConfig
from .tablet import ReadBuffer, ReplacementPolicy, TableSchema, Tablet
from .txn import GroupCommitter, Transaction, TransactionManager, TimestampAuthority


@dataclass
class EngineConfig:
    store: StoreConfig = field(default_factory=StoreConfig)
    read_buffer_capacity: int = 10_000
    replacement_policy: Optional[ReplacementPolicy] = None
    flush_threshold: int = 10_000
    # checkpoint after this many updates (0 = never) or this many seconds (0 = never)
    checkpoint_every: int = 0
    checkpoint_interval: float = 0.0
    keep_checkpoints: int = 2
    commit_delay: float = 0.0
    lock_retry_cap: int = 64
    max_value_size: int = 16 * 2**20


class LogStore:
    """Log-only storage engine with multiversion indexes and MVOCC transactions.

    Use :meth:`open` to get a running engine; it replays the log after the
    latest valid checkpoint.
    """

    def __init__(self, directory: str | os.PathLike, config: Optional[EngineConfig] = None):
        self.directory = os.fspath(directory)
        self.config = config or EngineConfig()
        for sub in ("log", "index", "checkpoints", "compaction"):
            os.makedirs(os.path.join(self.directory, sub), exist_ok=True)
        self.store = SegmentStore(os.path.join(self.directory, "log"), self.config.store)
        self.store.is_referenced = self._segment_referenced
        self.log_lock = threading.RLock()
        self.compaction_lock = threading.Lock()
        self._ckpt_lock = threading.RLock()
        self.read_buffer = ReadBuffer(self.config.read_buffer_capacity, self.config.replacement_policy)
        self.authority = TimestampAuthority()
        self.txns = TransactionManager(self, retry_cap=self.config.lock_retry_cap)
        self.committer = GroupCommitter(self, self.config.commit_delay)
        self.tables: dict[str, TableSchema] = {}
        self.tablets: dict[str, list[Tablet]] = {}
        self.lsn = 0
        self._lsn_lock = threading.Lock()
        self._index_gen = 0
        self._gen_lock = threading.Lock()
        self.updates_since_checkpoint = 0
        self.last_checkpoint_time = time.monotonic()
        self.last_checkpoint = None
        from .compaction import SortedSegmentMeta
        self.sorted_meta = SortedSegmentMeta()
        self.recovery_stats = None
        self._closed = False
        self._load_catalog()
        self._index_gen = max((_gen_of(n) for n in os.listdir(self.index_dir)), default=0)

    @classmethod
    def open(cls, directory: str | os.PathLike, config: Optional[EngineConfig] = None, **kw) -> "LogStore":
        from .recovery import recover
        return recover(directory, config, **kw)

    # -- paths / counters ------------------------------------------------------

    @property
    def index_dir(self) -> str:
        return os.path.join(self.directory, "index")

    @property
    def checkpoint_dir(self) -> str:
        return os.path.join(self.directory, "checkpoints")

    @property
    def compaction_dir(self) -> str:
        return os.path.join(self.directory, "compaction")

    def next_lsn(self) -> int:
        with self._lsn_lock:
            self.lsn += 1
            return self.lsn

    def next_index_gen(self) -> int:
        with self._gen_lock:
            self._index_gen += 1
            return self._index_gen

    # -- catalog ---------------------------------------------------------------

    def _catalog_path(self):
        return os.path.join(self.directory, "catalog.json")

    def _load_catalog(self):
        try:
            with open(self._catalog_path()) as f:
                data = json.load(f)
        except FileNotFoundError:
            return
        for d in data["tables"]:
            self._install_table(TableSchema.from_json(d))

    def _save_catalog(self):
        tmp = self._catalog_path() + ".tmp"
        with open(tmp, "w") as f:
            json.dump({"tables": [s.to_json() for s in self.tables.values()]}, f, indent=1)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self._catalog_path())

    def _install_table(self, schema: TableSchema):
        self.tables[schema.name] = schema
        self.tablets[schema.name] = [
            Tablet(schema, i, self.store, self.read_buffer, self.config.flush_threshold,
                   self.index_dir, self.next_index_gen, self.sorted_meta_owner)
            for i in range(len(schema.split_keys) + 1)
        ]

    def create_table(self, schema: TableSchema) -> TableSchema:
        if schema.name in self.tables:
            if self.tables[schema.name].to_json() != schema.to_json():
                raise SchemaError(f"table {schema.name!r} already exists with a different schema")
            return self.tables[schema.name]
        with self.log_lock:
            self._install_table(schema)
            self._save_catalog()
        return schema

    def sorted_meta_owner(self, seq: int):
        return self.sorted_meta.owner(seq)

    def schema(self, table: str) -> TableSchema:
        try:
            return self.tables[table]
        except KeyError:
            raise SchemaError(f"no such table {table!r}") from None

    def default_group(self, table: str, group: Optional[str]) -> str:
        if group is not None:
            return group
        groups = self.schema(table).column_groups
        if len(groups) != 1:
            raise SchemaError(f"table {table!r} has several column groups; name one")
        return next(iter(groups))

    def tablet_for(self, table: str, key: bytes) -> Tablet:
        schema = self.schema(table)
        return self.tablets[table][bisect.bisect_right(schema.split_keys, key)]

    def all_tablets(self) -> Iterator[Tablet]:
        for ts in self.tablets.values():
            yield from ts

    def _check_open(self):
        if self._closed:
            raise StoreClosedError("engine is closed")

    # -- single-record operations (auto-commit) --------------------------------

    def put(self, table: str, key: bytes, value: bytes, group: Optional[str] = None) -> int:
        """Write one version; returns its commit timestamp."""
        self._check_open()
        group = self.default_group(table, group)
        return self.txns.autocommit([(table, bytes(key), group, bytes(value))])[0].commit_ts

    def put_many(self, items, group: Optional[str] = None, table: Optional[str] = None) -> int:
        """Auto-commit many (table, key, value) or (key, value) writes with one sync."""
        self._check_open()
        ops = []
        for it in items:
            if len(it) == 3:
                tb, k, v = it
            else:
                (k, v), tb = it, table
            ops.append((tb, bytes(k), self.default_group(tb, group), bytes(v)))
        return len(self.txns.autocommit(ops))

    def delete(self, table: str, key: bytes, group: Optional[str] = None) -> bool:
        """Delete ``key``; deleting an absent key is a no-op returning False."""
        self._check_open()
        group = self.default_group(table, group)
        return bool(self.txns.autocommit([(table, bytes(key), group, None)]))

    def get(self, table: str, key: bytes, group: Optional[str] = None) -> Optional[bytes]:
        r = self.get_versioned(table, key, group)
        return None if r is None else r[0]

    def get_versioned(self, table: str, key: bytes, group: Optional[str] = None) -> Optional[tuple[bytes, int]]:
        self._check_open()
        group = self.default_group(table, group)
        return self.tablet_for(table, key).get(key, group)

    def get_as_of(self, table: str, key: bytes, t_q: int, group: Optional[str] = None) -> Optional[bytes]:
        self._check_open()
        group = self.default_group(table, group)
        r = self.tablet_for(table, key).get_as_of(key, group, t_q)
        return None if r is None else r[0]

    def range_index(self, table: str, start, end, group: str, snapshot_ts=None):
        for tablet in self.tablets[table]:
            if start is not None and tablet.high is not None and start >= tablet.high:
                continue
            if end is not None and tablet.low is not None and end <= tablet.low:
                continue
            yield from tablet.index(group).range(start, end, snapshot_ts)

    def range_scan(self, table: str, start: Optional[bytes], end: Optional[bytes],
                   group: Optional[str] = None, snapshot_ts: Optional[int] = None) -> Iterator[tuple[bytes, bytes]]:
        self._check_open()
        group = self.default_group(table, group)
        for tablet in self.tablets[table]:
            yield from tablet.range_scan(start, end, snapshot_ts, group)

    def full_scan(self, table: str, group: Optional[str] = None,
                  snapshot_ts: Optional[int] = None) -> Iterator[tuple[bytes, bytes]]:
        self._check_open()
        group = self.default_group(table, group)
        for tablet in self.tablets[table]:
            yield from tablet.full_scan(group, snapshot_ts)

    def reconstruct(self, table: str, key: bytes, snapshot_ts: Optional[int] = None):
        self._check_open()
        return self.tablet_for(table, key).reconstruct_tuple(key, snapshot_ts)

    # -- transactions ----------------------------------------------------------

    def begin(self) -> Transaction:
        self._check_open()
        return self.txns.begin()

    def after_commit(self):
        cfg = self.config
        due = (cfg.checkpoint_every and self.updates_since_checkpoint >= cfg.checkpoint_every) or (
            cfg.checkpoint_interval and time.monotonic() - self.last_checkpoint_time >= cfg.checkpoint_interval)
        if due and self._ckpt_lock.acquire(blocking=False):
            try:
                self.checkpoint()
            finally:
                self._ckpt_lock.release()

    # -- maintenance -----------------------------------------------------------

    def checkpoint(self):
        from .recovery import checkpoint
        self._check_open()
        return checkpoint(self)

    def compact(self, config=None, **kw):
        from .compaction import compact
        self._check_open()
        return compact(self, config, **kw)

    def estimate_reclaim(self, segments=None) -> int:
        from .compaction import estimate_reclaim
        return estimate_reclaim(self, segments)

    def _segment_referenced(self, seq: int) -> bool:
        for t in self.all_tablets():
            for idx in t.indexes.values():
                if seq in idx.segments_referenced():
                    return True
        ck = self.last_checkpoint
        if ck is not None and ck.log_position.segment == seq:
            return True
        return False

    def stats(self) -> dict:
        s = self.store
        return {
            "bytes_appended": s.bytes_appended,
            "bytes_written_total": s.bytes_written_total(),
            "appends": s.append_count,
            "syncs": s.sync_count,
            "storage_reads": s.storage_reads,
            "commits": self.committer.commits,
            "commit_batches": self.committer.batches,
            "aborts": self.txns.aborts,
            "buffer_hits": self.read_buffer.hits,
            "buffer_misses": self.read_buffer.misses,
            "index_entries": sum(i.entry_count() for t in self.all_tablets() for i in t.indexes.values()),
            "segments": len(s.list_segments()),
        }

    def close(self):
        if self._closed:
            return
        with self.log_lock:
            self.store.close()
            self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _gen_of(name: str) -> int:
    parts = name.split(".")
    if len(parts) >= 2 and parts[-1] == "idx" and parts[-2].isdigit():
        return int(parts[-2])
    return 0
