"""Multiversion optimistic transactions with validation-time write locks.

Reads come from the snapshot taken at begin(); writes are buffered.  At commit
the write set is locked in key order, every written key is validated against
the version observed at read time (first committer wins), a commit timestamp
is drawn, and the group committer persists the writes followed by one commit
record before the index is updated.

Phantoms are handled by an extension of our own: a transaction that scanned a
range and also writes re-runs the range against the latest index at commit and
aborts if the key set changed.
"""

from __future__ import annotations

import enum
import itertools
import threading
import time
import weakref
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Hashable, Optional

from . import codec
from .codec import Commit, Invalidated, LogKey, RowKey, Write
from .errors import ConflictError, LogStoreError, TransactionStateError
from .segment_store import LogAddress

if TYPE_CHECKING:
    from .db import LogStore
    from .tablet import Tablet

ABSENT = None


class TxnStatus(enum.Enum):
    ACTIVE = "active"
    VALIDATING = "validating"
    COMMITTED = "committed"
    ABORTED = "aborted"


class TimestampAuthority:
    """Single monotonic counter for snapshots and commit timestamps.

    Commit timestamps stay *pending* until their writes reach the index; a new
    snapshot waits for every pending timestamp below it, so a reader never
    misses a commit that is older than its snapshot.
    """

    def __init__(self, start: int = 0):
        self._counter = start
        self._pending: set[int] = set()
        self._cv = threading.Condition()

    @property
    def current(self) -> int:
        return self._counter

    def advance_to(self, ts: int):
        with self._cv:
            self._counter = max(self._counter, ts)

    def snapshot(self) -> int:
        with self._cv:
            self._counter += 1
            s = self._counter
            self._cv.wait_for(lambda: not any(p < s for p in self._pending))
            return s

    def next_commit_ts(self) -> int:
        with self._cv:
            self._counter += 1
            self._pending.add(self._counter)
            return self._counter

    def wait_applied_below(self, ts: int):
        with self._cv:
            self._cv.wait_for(lambda: not any(p < ts for p in self._pending))

    def done(self, ts: int):
        with self._cv:
            if ts in self._pending:
                self._pending.discard(ts)
                self._cv.notify_all()


class LockTable:
    """Exclusive write locks keyed by (table, group, key)."""

    def __init__(self):
        self._holders: dict[Hashable, int] = {}
        self._cv = threading.Condition()

    def try_acquire(self, key, txn_id: int) -> bool:
        with self._cv:
            h = self._holders.get(key)
            if h is None:
                self._holders[key] = txn_id
                return True
            return h == txn_id

    def holder(self, key) -> Optional[int]:
        return self._holders.get(key)

    def wait_for_release(self, timeout: float):
        with self._cv:
            self._cv.wait(timeout)

    def release(self, keys, txn_id: int):
        with self._cv:
            for k in keys:
                if self._holders.get(k) == txn_id:
                    del self._holders[k]
            self._cv.notify_all()

    def __len__(self):
        return len(self._holders)


@dataclass
class CommitRequest:
    txn_id: int
    commit_ts: int
    # (tablet, group, key, value); value None means delete
    writes: list[tuple["Tablet", str, bytes, Optional[bytes]]]
    done: bool = False
    error: Optional[BaseException] = None
    commit_address: Optional[LogAddress] = None
    addresses: list[LogAddress] = field(default_factory=list)


class GroupCommitter:
    """Batches commit requests from concurrent committers into one append + sync.

    Whoever holds the log lock drains the queue and persists every queued
    transaction, each as its data entries followed by its commit record.  The
    index is updated only after the batch is durable.
    """

    def __init__(self, engine: "LogStore", commit_delay: float = 0.0):
        self.engine = engine
        self.commit_delay = commit_delay
        self.log_lock = engine.log_lock
        self._queue: list[CommitRequest] = []
        self._qlock = threading.Lock()
        self.batches = 0
        self.commits = 0

    def submit(self, req: CommitRequest) -> CommitRequest:
        self.submit_many([req])
        return req

    def submit_many(self, reqs: list[CommitRequest]):
        with self._qlock:
            self._queue.extend(reqs)
        with self.log_lock:
            if not all(r.done for r in reqs):
                if self.commit_delay:
                    time.sleep(self.commit_delay)
                with self._qlock:
                    batch, self._queue = self._queue, []
                self._persist(batch)
        for r in reqs:
            if r.error is not None:
                raise r.error
            if not r.done:
                raise LogStoreError(f"commit of txn {r.txn_id} was not processed")

    def _persist(self, batch: list[CommitRequest]):
        eng = self.engine
        payloads: list[bytes] = []
        plan: list[tuple[CommitRequest, list]] = []
        max_value = eng.config.max_value_size
        try:
            for req in batch:
                items = []
                for tablet, group, key, value in req.writes:
                    lk = LogKey(eng.next_lsn(), tablet.table, tablet.tablet_id)
                    rk = RowKey(key, group, req.commit_ts)
                    e = Write(lk, rk, req.txn_id, value) if value is not None else Invalidated(lk, rk, req.txn_id)
                    payloads.append(codec.encode(e, max_value))
                    items.append((tablet, e))
                c = Commit(LogKey(eng.next_lsn(), "", 0), req.txn_id, req.commit_ts)
                payloads.append(codec.encode(c, max_value))
                plan.append((req, items))
            addrs = eng.store.append_many(payloads)
            eng.store.sync()
        except BaseException as exc:
            for req in batch:
                req.error = exc if isinstance(exc, LogStoreError) else LogStoreError(f"log persistence failed: {exc}")
                req.done = True
                eng.authority.done(req.commit_ts)
            return
        self.batches += 1
        i = 0
        for req, items in plan:
            for tablet, e in items:
                addr = addrs[i]
                i += 1
                req.addresses.append(addr)
                if isinstance(e, Write):
                    tablet.apply_write(e, addr)
                else:
                    tablet.apply_delete(e, addr)
            req.commit_address = addrs[i]
            i += 1
            eng.updates_since_checkpoint += len(items)
            eng.authority.done(req.commit_ts)
            req.done = True
            self.commits += 1


@dataclass
class RangeRead:
    table: str
    group: str
    start: Optional[bytes]
    end: Optional[bytes]
    keys: frozenset


class Transaction:
    """Handle returned by ``LogStore.begin()``."""

    def __init__(self, manager: "TransactionManager", txn_id: int, snapshot_ts: int):
        self.manager = manager
        self.txn_id = txn_id
        self.snapshot_ts = snapshot_ts
        self.read_set: dict[tuple[str, str, bytes], Optional[int]] = {}
        self.write_set: dict[tuple[str, str, bytes], Optional[bytes]] = {}
        self.range_reads: list[RangeRead] = []
        self.status = TxnStatus.ACTIVE
        self.commit_ts: Optional[int] = None
        self.commit_address: Optional[LogAddress] = None

    def __repr__(self):
        return f"Transaction(id={self.txn_id}, snapshot={self.snapshot_ts}, {self.status.value})"

    def read(self, table: str, key: bytes, group: Optional[str] = None) -> Optional[bytes]:
        return self.manager.txn_read(self, table, key, group)

    def write(self, table: str, key: bytes, value: Optional[bytes], group: Optional[str] = None):
        self.manager.txn_write(self, table, key, group, value)

    def delete(self, table: str, key: bytes, group: Optional[str] = None):
        self.manager.txn_write(self, table, key, group, None)

    def scan(self, table: str, start: Optional[bytes], end: Optional[bytes],
             group: Optional[str] = None) -> list[tuple[bytes, bytes]]:
        return self.manager.txn_range(self, table, start, end, group)

    def commit(self) -> int:
        return self.manager.commit(self)

    def abort(self):
        self.manager.abort(self)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if self.status is TxnStatus.ACTIVE:
            if exc_type is None:
                self.commit()
            else:
                self.abort()


class TransactionManager:
    def __init__(self, engine: "LogStore", retry_cap: int = 64, lock_wait: float = 0.002):
        self.engine = engine
        self.authority = engine.authority
        self.locks = LockTable()
        self.retry_cap = retry_cap
        self.lock_wait = lock_wait
        self._ids = itertools.count(1)
        self._id_lock = threading.Lock()
        self.last_txn_id = 0
        self.aborts = 0
        # open transactions; compaction must keep the versions they can see
        self._open: weakref.WeakValueDictionary[int, Transaction] = weakref.WeakValueDictionary()

    def restore_txn_id(self, last: int):
        with self._id_lock:
            self.last_txn_id = max(self.last_txn_id, last)
            self._ids = itertools.count(self.last_txn_id + 1)

    def new_txn_id(self) -> int:
        with self._id_lock:
            self.last_txn_id = next(self._ids)
            return self.last_txn_id

    def begin(self) -> Transaction:
        txn_id = self.new_txn_id()
        t = Transaction(self, txn_id, self.authority.snapshot())
        self._open[txn_id] = t
        return t

    def oldest_open_snapshot(self) -> Optional[int]:
        """Smallest snapshot among transactions that have not finished."""
        snaps = [t.snapshot_ts for t in list(self._open.values())
                 if t.status in (TxnStatus.ACTIVE, TxnStatus.VALIDATING)]
        return min(snaps, default=None)

    # -- read phase ------------------------------------------------------------

    def _check_active(self, t: Transaction):
        if t.status is not TxnStatus.ACTIVE:
            raise TransactionStateError(f"{t!r} is not active")

    def txn_read(self, t: Transaction, table: str, key: bytes, group: Optional[str]) -> Optional[bytes]:
        self._check_active(t)
        group = self.engine.default_group(table, group)
        wk = (table, group, key)
        if wk in t.write_set:
            return t.write_set[wk]
        tablet = self.engine.tablet_for(table, key)
        tablet.check(key, group)
        e = tablet.index(group).get_as_of(key, t.snapshot_ts)
        if wk not in t.read_set:
            t.read_set[wk] = e.ts if e is not None else ABSENT
        r = tablet.get_as_of(key, group, t.snapshot_ts)
        return None if r is None else r[0]

    def txn_write(self, t: Transaction, table: str, key: bytes, group: Optional[str], value: Optional[bytes]):
        self._check_active(t)
        group = self.engine.default_group(table, group)
        wk = (table, group, key)
        if wk not in t.read_set and wk not in t.write_set:
            # no blind writes: record the version this write is based on
            self.txn_read(t, table, key, group)
        t.write_set[wk] = None if value is None else bytes(value)

    def txn_range(self, t: Transaction, table: str, start: Optional[bytes], end: Optional[bytes],
                  group: Optional[str]) -> list[tuple[bytes, bytes]]:
        self._check_active(t)
        group = self.engine.default_group(table, group)
        found = dict(self.engine.range_scan(table, start, end, group, snapshot_ts=t.snapshot_ts))
        t.range_reads.append(RangeRead(table, group, start, end, frozenset(found)))
        for (tb, g, k), v in t.write_set.items():
            if tb == table and g == group and (start is None or k >= start) and (end is None or k < end):
                if v is None:
                    found.pop(k, None)
                else:
                    found[k] = v
        return sorted(found.items())

    # -- commit ----------------------------------------------------------------

    def _current_version(self, table: str, group: str, key: bytes) -> Optional[int]:
        e = self.engine.tablet_for(table, key).index(group).get_latest(key)
        return e.ts if e is not None else ABSENT

    def _unchanged(self, t: Transaction, wk) -> bool:
        return self._current_version(*wk) == t.read_set.get(wk, ABSENT)

    def _range_unchanged(self, rr: RangeRead) -> bool:
        now = frozenset(k for k, _ in self.engine.range_index(rr.table, rr.start, rr.end, rr.group))
        return now == rr.keys

    def _acquire(self, t: Transaction, keys: list) -> list:
        held = []
        retries = 0
        try:
            for k in keys:
                while not self.locks.try_acquire(k, t.txn_id):
                    retries += 1
                    # re-check the read phase; a changed version can never validate
                    if k in t.read_set and not self._unchanged(t, k):
                        raise ConflictError(f"{k!r} changed while waiting for its lock")
                    if retries > self.retry_cap:
                        raise ConflictError(f"gave up waiting for lock on {k!r}")
                    self.locks.wait_for_release(self.lock_wait * min(retries, 16))
                held.append(k)
        except BaseException:
            self.locks.release(held, t.txn_id)
            raise
        return held

    def commit(self, t: Transaction) -> int:
        self._check_active(t)
        if not t.write_set:
            # read-only transactions always commit at their snapshot
            t.status = TxnStatus.COMMITTED
            t.commit_ts = t.snapshot_ts
            return t.snapshot_ts
        t.status = TxnStatus.VALIDATING
        keys = sorted(t.write_set)
        held: list = []
        ts = None
        try:
            held = self._acquire(t, keys)
            for k in keys:
                if not self._unchanged(t, k):
                    raise ConflictError(f"write-write conflict on {k!r}")
            ts = self.authority.next_commit_ts()
            if t.range_reads:
                self.authority.wait_applied_below(ts)
                for rr in t.range_reads:
                    if not self._range_unchanged(rr):
                        raise ConflictError(f"phantom in range {rr.start!r}..{rr.end!r}")
            writes = []
            for (table, group, key) in keys:
                value = t.write_set[(table, group, key)]
                tablet = self.engine.tablet_for(table, key)
                if value is None:
                    cur = tablet.index(group).get_latest(key)
                    if cur is None or cur.tombstone:
                        continue
                writes.append((tablet, group, key, value))
            req = CommitRequest(t.txn_id, ts, writes)
            self.engine.committer.submit(req)
        except BaseException:
            t.status = TxnStatus.ABORTED
            self.aborts += 1
            if ts is not None:
                self.authority.done(ts)
            raise
        finally:
            self.locks.release(held, t.txn_id)
        t.status = TxnStatus.COMMITTED
        t.commit_ts = ts
        t.commit_address = req.commit_address
        self.engine.after_commit()
        return ts

    def abort(self, t: Transaction):
        if t.status in (TxnStatus.ABORTED, TxnStatus.COMMITTED):
            if t.status is TxnStatus.COMMITTED:
                raise TransactionStateError("cannot abort a committed transaction")
            return
        t.status = TxnStatus.ABORTED
        t.write_set.clear()

    # -- auto-commit -----------------------------------------------------------

    def autocommit(self, ops: list[tuple[str, bytes, str, Optional[bytes]]]) -> list[CommitRequest]:
        """Commit each (table, key, group, value) as its own single-write transaction.

        All of them go to the group committer together, so a bulk call costs
        one log sync.
        """
        owner = self.new_txn_id()
        wkeys = sorted({(table, group, key) for table, key, group, _ in ops})
        for table, group, key in wkeys:
            self.engine.tablet_for(table, key).check(key, group)
        held: list = []
        reqs: list[CommitRequest] = []
        try:
            for wk in wkeys:
                spins = 0
                while not self.locks.try_acquire(wk, owner):
                    spins += 1
                    self.locks.wait_for_release(self.lock_wait * min(spins, 16))
                held.append(wk)
            live: dict = {}
            for table, key, group, value in ops:
                wk = (table, group, key)
                tablet = self.engine.tablet_for(table, key)
                if wk not in live:
                    cur = tablet.index(group).get_latest(key)
                    live[wk] = cur is not None and not cur.tombstone
                if value is None and not live[wk]:
                    continue
                live[wk] = value is not None
                reqs.append(CommitRequest(self.new_txn_id(), self.authority.next_commit_ts(),
                                          [(tablet, group, key, value)]))
            if reqs:
                self.engine.committer.submit_many(reqs)
        except BaseException:
            for r in reqs:
                self.authority.done(r.commit_ts)
            raise
        finally:
            self.locks.release(held, owner)
        self.engine.after_commit()
        return reqs
