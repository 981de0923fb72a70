"""Per-tablet data access: log + multiversion index + read buffer."""

from __future__ import annotations

import os
import re
import threading
from abc import ABC, abstractmethod
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterator, Optional

from . import codec
from .codec import Invalidated, LogKey, RowKey, Stripped, Write
from .errors import KeyRangeError, MissingSegmentError, SchemaError
from .mvindex import IndexEntry, MVIndex
from .segment_store import LogAddress, SegmentStore

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_\-]*$")


@dataclass
class TableSchema:
    """A table split vertically into column groups and horizontally into tablets.

    ``split_keys`` are the tablet boundaries: tablet ``i`` owns keys in
    ``[split_keys[i-1], split_keys[i])`` with open ends.
    """

    name: str
    column_groups: dict[str, list[str]]
    primary_key: str = "id"
    split_keys: list[bytes] = field(default_factory=list)
    column_widths: dict[str, int] = field(default_factory=dict)
    key_width: int = 8

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise SchemaError(f"bad table name {self.name!r}")
        if not self.column_groups:
            raise SchemaError("a table needs at least one column group")
        seen: set[str] = set()
        for g, cols in self.column_groups.items():
            if not _NAME_RE.match(g):
                raise SchemaError(f"bad column group name {g!r}")
            for c in cols:
                if c == self.primary_key:
                    continue
                if c in seen:
                    raise SchemaError(f"column {c!r} appears in more than one group")
                seen.add(c)
        if list(self.split_keys) != sorted(set(self.split_keys)):
            raise SchemaError("split_keys must be strictly ascending")

    @property
    def columns(self) -> list[str]:
        return [c for cols in self.column_groups.values() for c in cols if c != self.primary_key]

    def tablet_ranges(self) -> list[tuple[Optional[bytes], Optional[bytes]]]:
        bounds = [None, *self.split_keys, None]
        return list(zip(bounds[:-1], bounds[1:]))

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "column_groups": self.column_groups,
            "primary_key": self.primary_key,
            "split_keys": [k.hex() for k in self.split_keys],
            "column_widths": self.column_widths,
            "key_width": self.key_width,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TableSchema":
        return cls(d["name"], {g: list(c) for g, c in d["column_groups"].items()},
                   d.get("primary_key", "id"), [bytes.fromhex(k) for k in d.get("split_keys", [])],
                   dict(d.get("column_widths", {})), d.get("key_width", 8))


# -- read buffer ---------------------------------------------------------------


class ReplacementPolicy(ABC):
    """Chooses which cached record to evict when the buffer is full."""

    @abstractmethod
    def inserted(self, key: Hashable) -> None: ...

    @abstractmethod
    def accessed(self, key: Hashable) -> None: ...

    @abstractmethod
    def removed(self, key: Hashable) -> None: ...

    @abstractmethod
    def victim(self) -> Hashable: ...


class LRUPolicy(ReplacementPolicy):
    def __init__(self):
        self._order: OrderedDict = OrderedDict()

    def inserted(self, key):
        self._order[key] = None

    def accessed(self, key):
        self._order.move_to_end(key)

    def removed(self, key):
        self._order.pop(key, None)

    def victim(self):
        return next(iter(self._order))


class FIFOPolicy(LRUPolicy):
    def accessed(self, key):
        pass


class ReadBuffer:
    """Cache of latest committed versions keyed by (table, group, primary_key)."""

    def __init__(self, capacity: int = 10_000, policy: Optional[ReplacementPolicy] = None):
        self.capacity = capacity
        self.policy = policy or LRUPolicy()
        self._data: dict[Hashable, tuple[int, bytes]] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self._data)

    def get(self, key) -> Optional[tuple[int, bytes]]:
        with self._lock:
            v = self._data.get(key)
            if v is None:
                self.misses += 1
                return None
            self.hits += 1
            self.policy.accessed(key)
            return v

    def peek(self, key) -> Optional[tuple[int, bytes]]:
        return self._data.get(key)

    def _insert(self, key, ts, value):
        if key in self._data:
            self._data[key] = (ts, value)
            self.policy.accessed(key)
            return
        while len(self._data) >= self.capacity:
            v = self.policy.victim()
            self.policy.removed(v)
            del self._data[v]
        self._data[key] = (ts, value)
        self.policy.inserted(key)

    def put_if_current(self, key, ts: int, value: bytes, current_ts: Callable[[], Optional[int]]):
        """Cache (ts, value) unless a newer version became current meanwhile."""
        if self.capacity <= 0:
            return
        with self._lock:
            if current_ts() == ts:
                self._insert(key, ts, value)

    def update_if_present(self, key, ts: int, value: bytes):
        with self._lock:
            cur = self._data.get(key)
            if cur is not None and cur[0] < ts:
                self._data[key] = (ts, value)

    def invalidate(self, key):
        with self._lock:
            if self._data.pop(key, None) is not None:
                self.policy.removed(key)

    def clear(self):
        with self._lock:
            for k in list(self._data):
                self.policy.removed(k)
            self._data.clear()


# -- tablet --------------------------------------------------------------------


def entry_value(entry) -> Optional[bytes]:
    if isinstance(entry, (Write, Stripped)):
        return entry.value
    return None


class Tablet:
    """One key range of one table; holds an index per column group."""

    def __init__(self, schema: TableSchema, tablet_id: int, store: SegmentStore,
                 read_buffer: Optional[ReadBuffer] = None, flush_threshold: int = 10_000,
                 index_dir: Optional[str] = None,
                 next_index_gen: Optional[Callable[[], int]] = None,
                 segment_owner: Optional[Callable[[int], Optional[tuple[str, str]]]] = None):
        self.schema = schema
        self.table = schema.name
        self.tablet_id = tablet_id
        self.low, self.high = schema.tablet_ranges()[tablet_id]
        self.store = store
        self.read_buffer = read_buffer if read_buffer is not None else ReadBuffer(0)
        self.flush_threshold = flush_threshold
        self.index_dir = index_dir
        self._gen = next_index_gen or _counter()
        self.segment_owner = segment_owner or (lambda seq: None)
        self.indexes: dict[str, MVIndex] = {g: MVIndex() for g in schema.column_groups}
        self.update_counters: dict[str, int] = {g: 0 for g in schema.column_groups}
        self.index_files_persisted = 0

    def __repr__(self):
        return f"Tablet({self.table}#{self.tablet_id})"

    def contains(self, key: bytes) -> bool:
        return (self.low is None or key >= self.low) and (self.high is None or key < self.high)

    def check(self, key: bytes, group: str):
        if not self.contains(key):
            raise KeyRangeError(f"key {key!r} outside {self!r}")
        if group not in self.indexes:
            raise SchemaError(f"table {self.table!r} has no column group {group!r}")

    def index(self, group: str) -> MVIndex:
        try:
            return self.indexes[group]
        except KeyError:
            raise SchemaError(f"table {self.table!r} has no column group {group!r}") from None

    def _bkey(self, group, key):
        return (self.table, group, key)

    # -- write path ------------------------------------------------------------

    def write(self, key: bytes, group: str, value: bytes, txn_id: int, commit_ts: int, lsn: int) -> LogAddress:
        self.check(key, group)
        e = Write(LogKey(lsn, self.table, self.tablet_id), RowKey(key, group, commit_ts), txn_id, value)
        addr = self.store.append(codec.encode(e))
        self.apply_write(e, addr)
        return addr

    def delete(self, key: bytes, group: str, txn_id: int, commit_ts: int, lsn: int) -> Optional[LogAddress]:
        self.check(key, group)
        latest = self.index(group).get_latest(key)
        if latest is None or latest.tombstone:
            return None
        e = Invalidated(LogKey(lsn, self.table, self.tablet_id), RowKey(key, group, commit_ts), txn_id)
        addr = self.store.append(codec.encode(e))
        self.apply_delete(e, addr)
        return addr

    def apply_write(self, e: Write, addr: LogAddress):
        rk = e.row_key
        self.index(rk.column_group).put(IndexEntry(rk.primary_key, rk.write_ts, addr, e.lsn))
        self.read_buffer.update_if_present(self._bkey(rk.column_group, rk.primary_key), rk.write_ts, e.value)
        self._count_update(rk.column_group)

    def apply_delete(self, e: Invalidated, addr: LogAddress):
        rk = e.row_key
        idx = self.index(rk.column_group)
        idx.remove_all_versions(rk.primary_key)
        idx.put(IndexEntry(rk.primary_key, rk.write_ts, addr, e.lsn, tombstone=True))
        self.read_buffer.invalidate(self._bkey(rk.column_group, rk.primary_key))
        self._count_update(rk.column_group)

    def _count_update(self, group: str):
        self.update_counters[group] += 1
        if self.flush_threshold and self.update_counters[group] >= self.flush_threshold:
            self.flush_index(group)

    def index_path(self, group: str, gen: int) -> str:
        return os.path.join(self.index_dir, f"{self.table}.{self.tablet_id}.{group}.{gen:08d}.idx")

    def flush_index(self, group: str):
        self.update_counters[group] = 0
        if self.index_dir is None:
            return
        self.index(group).persist(self.index_path(group, self._gen()))
        self.index_files_persisted += 1

    # -- read path -------------------------------------------------------------

    def _fetch(self, entry: IndexEntry) -> Optional[bytes]:
        return entry_value(codec.decode(self.store.read(entry.addr)))

    def _resolve(self, lookup: Callable[[MVIndex], Optional[IndexEntry]], group: str):
        # a compaction swap may retire the segment between lookup and read
        for attempt in range(3):
            e = lookup(self.index(group))
            if e is None or e.tombstone:
                return None, None
            try:
                return e, self._fetch(e)
            except MissingSegmentError:
                if attempt == 2:
                    raise
        return None, None

    def get(self, key: bytes, group: str) -> Optional[tuple[bytes, int]]:
        self.check(key, group)
        bkey = self._bkey(group, key)
        hit = self.read_buffer.get(bkey) if self.read_buffer.capacity > 0 else None
        if hit is not None:
            return hit[1], hit[0]
        e, value = self._resolve(lambda idx: idx.get_latest(key), group)
        if e is None:
            return None
        idx = self.index(group)

        def current():
            cur = idx.get_latest(key)
            return None if cur is None or cur.tombstone else cur.ts

        self.read_buffer.put_if_current(bkey, e.ts, value, current)
        return value, e.ts

    def get_as_of(self, key: bytes, group: str, t_q: int) -> Optional[tuple[bytes, int]]:
        self.check(key, group)
        e = self.index(group).get_as_of(key, t_q)
        if e is None or e.tombstone:
            return None
        cached = self.read_buffer.peek(self._bkey(group, key))
        if cached is not None and cached[0] == e.ts:
            return cached[1], cached[0]
        e, value = self._resolve(lambda idx: idx.get_as_of(key, t_q), group)
        if e is None:
            return None
        return value, e.ts

    def range_scan(self, start: Optional[bytes], end: Optional[bytes],
                   snapshot_ts: Optional[int], group: str) -> Iterator[tuple[bytes, bytes]]:
        if start is not None and self.high is not None and start >= self.high:
            return
        if end is not None and self.low is not None and end <= self.low:
            return
        for key, e in self.index(group).range(start, end, snapshot_ts):
            try:
                yield key, self._fetch(e)
            except MissingSegmentError:
                r = self.get_as_of(key, group, snapshot_ts) if snapshot_ts is not None else self.get(key, group)
                if r is not None:
                    yield key, r[0]

    def full_scan(self, group: str, snapshot_ts: Optional[int] = None) -> Iterator[tuple[bytes, bytes]]:
        """Scan every segment sequentially, keeping versions the index vouches for.

        A data entry qualifies when its address is the index's version as of
        ``snapshot_ts`` and its transaction has a commit record in the log
        (sorted segments only ever hold committed data).
        """
        idx = self.index(group)
        candidates: list[tuple[int, bytes, bytes]] = []
        committed: set[int] = set()
        for seq in self.store.list_segments():
            owner = None
            sorted_seg = self.store.segment_kind(seq).value == "sorted"
            if sorted_seg:
                owner = self.segment_owner(seq)
                if owner != (self.table, group):
                    continue
            try:
                scan = self.store.scan(segments=[seq])
                for addr, payload in scan:
                    e = codec.decode(payload)
                    if isinstance(e, codec.Commit):
                        committed.add(e.txn_id)
                        continue
                    if isinstance(e, Stripped):
                        key, txn = e.primary_key, None
                    elif isinstance(e, Write):
                        if e.log_key.table != self.table or e.row_key.column_group != group:
                            continue
                        key, txn = e.row_key.primary_key, e.txn_id
                    else:
                        continue
                    if not self.contains(key):
                        continue
                    cur = idx.get_latest(key) if snapshot_ts is None else idx.get_as_of(key, snapshot_ts)
                    if cur is None or cur.tombstone or cur.addr != addr:
                        continue
                    candidates.append((txn, key, e.value))
            except MissingSegmentError:
                continue
        for txn, key, value in candidates:
            if txn is None or txn in committed:
                yield key, value

    def reconstruct_tuple(self, key: bytes, snapshot_ts: Optional[int] = None) -> Optional[dict[str, Optional[bytes]]]:
        """Merge every column group's version of ``key``; absent groups map to None."""
        out: dict[str, Optional[bytes]] = {}
        for g in self.indexes:
            r = self.get(key, g) if snapshot_ts is None else self.get_as_of(key, g, snapshot_ts)
            out[g] = None if r is None else r[0]
        if all(v is None for v in out.values()):
            return None
        return out


def _counter():
    n = [0]

    def nxt():
        n[0] += 1
        return n[0]
    return nxt
