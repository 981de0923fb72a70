"""Checkpointing and restart recovery.

Checkpoint block file (``checkpoints/ckpt-{seq:08d}.ckpt``)::

    magic b"LSCK" | version u32 | payload_len u32 | payload | crc32(payload) u32

The payload is UTF-8 JSON (sorted keys) with fields ``seq``,
``log_position`` ([segment, offset]), ``last_lsn``, ``last_ts``,
``last_txn_id``, ``index_files`` (list of [table, tablet, group, file name,
entries]), ``sorted_meta`` and ``created``.  The text file ``CHECKPOINT``
names the current block and is replaced atomically.

Recovery loads the newest block that verifies (falling back to older ones,
then to a rebuild from the whole log), then redoes the committed suffix of
the log.  A log entry only overwrites an index entry with a smaller LSN, so
recovery can be repeated any number of times.
"""

from __future__ import annotations

import json
import os
import re
import struct
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import codec
from .codec import Commit, Invalidated, Stripped, Write
from .errors import ChecksumError, LogStoreError, MissingSegmentError
from .mvindex import IndexEntry, MVIndex, write_index_file
from .segment_store import LogAddress, SegmentKind

MAGIC = b"LSCK"
VERSION = 1
POINTER = "CHECKPOINT"
_HDR = struct.Struct("<4sII")
_CRC = struct.Struct("<I")
_CKPT_RE = re.compile(r"^ckpt-(\d{8})\.ckpt$")


class RecoveryCrash(Exception):
    """Raised by test hooks to simulate a crash part-way through recovery."""


@dataclass
class CheckpointBlock:
    seq: int
    log_position: LogAddress
    last_lsn: int
    last_ts: int
    last_txn_id: int
    index_files: list[tuple[str, int, str, str, int]] = field(default_factory=list)
    sorted_meta: dict = field(default_factory=dict)
    created: float = 0.0

    @property
    def name(self) -> str:
        return f"ckpt-{self.seq:08d}.ckpt"

    def to_bytes(self) -> bytes:
        payload = json.dumps({
            "seq": self.seq,
            "log_position": [self.log_position.segment, self.log_position.offset],
            "last_lsn": self.last_lsn,
            "last_ts": self.last_ts,
            "last_txn_id": self.last_txn_id,
            "index_files": [list(f) for f in self.index_files],
            "sorted_meta": self.sorted_meta,
            "created": self.created,
        }, sort_keys=True).encode()
        return _HDR.pack(MAGIC, VERSION, len(payload)) + payload + _CRC.pack(zlib.crc32(payload))

    @classmethod
    def from_bytes(cls, data: bytes) -> "CheckpointBlock":
        if len(data) < _HDR.size + _CRC.size:
            raise ChecksumError("checkpoint block truncated")
        magic, ver, n = _HDR.unpack_from(data)
        if magic != MAGIC or ver != VERSION or len(data) != _HDR.size + n + _CRC.size:
            raise ChecksumError("bad checkpoint header")
        payload = data[_HDR.size:_HDR.size + n]
        (crc,) = _CRC.unpack_from(data, _HDR.size + n)
        if zlib.crc32(payload) != crc:
            raise ChecksumError("checkpoint checksum mismatch")
        d = json.loads(payload)
        seg, off = d["log_position"]
        return cls(d["seq"], LogAddress(seg, off, 0), d["last_lsn"], d["last_ts"], d["last_txn_id"],
                   [tuple(f) for f in d["index_files"]], d["sorted_meta"], d["created"])


def _fsync_dir(path: str):
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def _write_atomic(path: str, data: bytes):
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    _fsync_dir(os.path.dirname(path))


def checkpoint_files(engine) -> list[str]:
    names = [n for n in os.listdir(engine.checkpoint_dir) if _CKPT_RE.match(n)]
    return sorted(names)


def checkpoint(engine) -> CheckpointBlock:
    """Persist every index plus a consistent log position; serving continues."""
    with engine._ckpt_lock:
        return _checkpoint(engine)


def _checkpoint(engine) -> CheckpointBlock:
    existing = checkpoint_files(engine)
    seq = (int(_CKPT_RE.match(existing[-1]).group(1)) + 1) if existing else 1
    todo = []
    refs = []
    with engine.log_lock:
        pos = engine.store.end_address()
        last_lsn = engine.lsn
        last_ts = engine.authority.current
        last_txn = engine.txns.last_txn_id
        meta = engine.sorted_meta.to_json()
        for t in engine.all_tablets():
            for g, idx in t.indexes.items():
                p = idx.persisted
                if p is not None and p.mutation_version == idx.mutation_version and os.path.exists(p.path):
                    refs.append((t.table, t.tablet_id, g, os.path.basename(p.path), p.entries))
                else:
                    snap, mv = idx.snapshot()
                    todo.append((t, g, idx, snap, mv))
        engine.updates_since_checkpoint = 0
        engine.last_checkpoint_time = time.monotonic()
    for t, g, idx, snap, mv in todo:
        path = t.index_path(g, engine.next_index_gen())
        ref = write_index_file(path, snap, mv)
        if idx.mutation_version == mv:
            idx.persisted = ref
        refs.append((t.table, t.tablet_id, g, os.path.basename(path), ref.entries))
    block = CheckpointBlock(seq, pos, last_lsn, last_ts, last_txn, sorted(refs), meta, time.time())
    path = os.path.join(engine.checkpoint_dir, block.name)
    _write_atomic(path, block.to_bytes())
    _write_atomic(os.path.join(engine.directory, POINTER), block.name.encode())
    engine.last_checkpoint = block
    _prune(engine)
    return block


def _prune(engine):
    keep = max(1, engine.config.keep_checkpoints)
    names = checkpoint_files(engine)
    for n in names[:-keep]:
        os.unlink(os.path.join(engine.checkpoint_dir, n))
    live: set[str] = set()
    for n in names[-keep:]:
        try:
            b = read_checkpoint(os.path.join(engine.checkpoint_dir, n))
        except ChecksumError:
            continue
        live.update(f[3] for f in b.index_files)
    for t in engine.all_tablets():
        for idx in t.indexes.values():
            if idx.persisted is not None:
                live.add(os.path.basename(idx.persisted.path))
    for n in os.listdir(engine.index_dir):
        if n.endswith(".idx") and n not in live:
            os.unlink(os.path.join(engine.index_dir, n))


def read_checkpoint(path: str) -> CheckpointBlock:
    try:
        with open(path, "rb") as f:
            return CheckpointBlock.from_bytes(f.read())
    except FileNotFoundError:
        raise ChecksumError(f"checkpoint {path} is missing") from None


def candidate_checkpoints(directory: str) -> list[str]:
    """Checkpoint files to try, most preferred first."""
    ck_dir = os.path.join(directory, "checkpoints")
    names = sorted((n for n in os.listdir(ck_dir) if _CKPT_RE.match(n)), reverse=True)
    try:
        with open(os.path.join(directory, POINTER)) as f:
            cur = f.read().strip()
    except FileNotFoundError:
        cur = None
    if cur in names:
        names.remove(cur)
        names.insert(0, cur)
    return names


# -- redo ----------------------------------------------------------------------


@dataclass
class ReplayStats:
    entries_scanned: int = 0
    entries_replayed: int = 0
    uncommitted_skipped: int = 0
    bytes_scanned: int = 0
    torn_tail: Optional[LogAddress] = None
    max_lsn: int = 0
    max_ts: int = 0
    max_txn_id: int = 0


def apply_redo(idx: MVIndex, e, addr: LogAddress) -> bool:
    """Apply one committed data entry to ``idx`` following the LSN rule."""
    if isinstance(e, Write):
        key, ts = e.row_key.primary_key, e.row_key.write_ts
        latest = idx.get_latest(key)
        if latest is not None and latest.tombstone and latest.lsn > e.lsn:
            return False
        return idx.put(IndexEntry(key, ts, addr, e.lsn))
    if isinstance(e, Invalidated):
        key = e.row_key.primary_key
        if e.lsn <= idx.max_lsn(key):
            return False
        idx.remove_all_versions(key)
        idx.put(IndexEntry(key, e.row_key.write_ts, addr, e.lsn, tombstone=True))
        return True
    return False


def replay(store, start: Optional[LogAddress], index_for: Callable, hook: Optional[Callable] = None,
           segments: Optional[list[int]] = None) -> ReplayStats:
    """Redo the committed entries of the active log from ``start``.

    ``index_for(table, tablet, group)`` returns the index to update (or None
    to ignore the entry).  Entries of transactions without a commit record in
    the scanned range are skipped.
    """
    stats = ReplayStats()
    scan = store.scan(start, SegmentKind.ACTIVE_LOG, segments)
    entries = []
    committed: dict[int, int] = {}
    for addr, payload in scan:
        e = codec.decode(payload)
        stats.entries_scanned += 1
        stats.max_lsn = max(stats.max_lsn, e.lsn)
        if isinstance(e, Commit):
            committed[e.txn_id] = e.commit_ts
            stats.max_ts = max(stats.max_ts, e.commit_ts)
            stats.max_txn_id = max(stats.max_txn_id, e.txn_id)
        elif isinstance(e, (Write, Invalidated)):
            stats.max_txn_id = max(stats.max_txn_id, e.txn_id)
            entries.append((addr, e))
    stats.torn_tail = scan.torn_tail
    stats.bytes_scanned = scan.bytes_scanned
    half = len(entries) // 2
    for i, (addr, e) in enumerate(entries):
        if hook is not None and i == half:
            hook("mid-redo")
        if e.txn_id not in committed:
            stats.uncommitted_skipped += 1
            continue
        idx = index_for(e.log_key.table, e.log_key.tablet, e.row_key.column_group)
        if idx is None:
            continue
        apply_redo(idx, e, addr)
        stats.entries_replayed += 1
    return stats


# -- recover -------------------------------------------------------------------


def _usable(engine, block: CheckpointBlock) -> bool:
    store = engine.store
    pos = block.log_position
    if pos.segment not in store.list_segments(SegmentKind.ACTIVE_LOG):
        return False
    if pos.offset > store.segment_size(pos.segment):
        return False
    from .compaction import SortedSegmentMeta
    meta = SortedSegmentMeta.from_json(block.sorted_meta)
    existing = set(store.list_segments(SegmentKind.SORTED))
    if not set(meta.all_segments()) <= existing:
        return False
    return all(os.path.exists(os.path.join(engine.index_dir, f[3])) for f in block.index_files)


def _load_block(engine, block: CheckpointBlock):
    from .compaction import SortedSegmentMeta
    loaded = {}
    for table, tablet, group, name, _ in block.index_files:
        loaded[(table, tablet, group)] = MVIndex.load(os.path.join(engine.index_dir, name))
    for t in engine.all_tablets():
        for g in t.indexes:
            t.indexes[g] = loaded.get((t.table, t.tablet_id, g), MVIndex())
    engine.sorted_meta = SortedSegmentMeta.from_json(block.sorted_meta)


def _index_for(engine):
    def f(table, tablet, group):
        ts = engine.tablets.get(table)
        if ts is None or tablet >= len(ts):
            return None
        return ts[tablet].indexes.get(group)
    return f


def recover(directory, config=None, crash_hook: Optional[Callable[[str], None]] = None):
    """Open ``directory`` and bring the indexes up to date.

    ``crash_hook(stage)`` is called at fixed points (``"opened"``,
    ``"loaded"``, ``"mid-redo"``, ``"before-truncate"``, ``"done"``) and may
    raise to simulate a crash during recovery.
    """
    from .compaction import SortedSegmentMeta, latest_meta
    from .db import LogStore

    hook = crash_hook or (lambda stage: None)
    engine = LogStore(directory, config)
    try:
        hook("opened")
        block = None
        fallbacks = 0
        for name in candidate_checkpoints(engine.directory):
            try:
                b = read_checkpoint(os.path.join(engine.checkpoint_dir, name))
                if not _usable(engine, b):
                    fallbacks += 1
                    continue
                _load_block(engine, b)
                block = b
                break
            except ChecksumError:
                fallbacks += 1
                for t in engine.all_tablets():
                    for g in t.indexes:
                        t.indexes[g] = MVIndex()
                continue

        start = None
        base = ReplayStats()
        if block is not None:
            start = block.log_position
            base.max_lsn, base.max_ts, base.max_txn_id = block.last_lsn, block.last_ts, block.last_txn_id
            engine.last_checkpoint = block
        else:
            meta = latest_meta(engine)
            if meta is not None:
                engine.sorted_meta = meta
                base = _rebuild_sorted(engine, meta)
                start = meta.cut
        _drop_orphans(engine)
        hook("loaded")

        stats = replay(engine.store, start, _index_for(engine), hook)
        if stats.torn_tail is not None:
            hook("before-truncate")
            if stats.torn_tail.segment == engine.store.active_segment:
                engine.store.truncate_active(stats.torn_tail.offset)
            else:
                raise LogStoreError(f"torn frame outside the active segment at {stats.torn_tail}")
        max_ts = max(stats.max_ts, base.max_ts, _max_index_ts(engine))
        engine.lsn = max(stats.max_lsn, base.max_lsn)
        engine.authority.advance_to(max_ts)
        engine.txns.restore_txn_id(max(stats.max_txn_id, base.max_txn_id))
        stats.max_lsn, stats.max_ts = engine.lsn, max_ts
        engine.recovery_stats = RecoveryStats(
            checkpoint=block.name if block is not None else None,
            fallbacks=fallbacks,
            replay=stats,
        )
        hook("done")
    except BaseException:
        engine.store.close()
        raise
    return engine


@dataclass
class RecoveryStats:
    checkpoint: Optional[str]
    fallbacks: int
    replay: ReplayStats


def _max_index_ts(engine) -> int:
    m = 0
    for t in engine.all_tablets():
        for idx in t.indexes.values():
            for k in idx.keys_in(None, None):
                e = idx.get_latest(k)
                if e is not None and e.ts > m:
                    m = e.ts
    return m


def _rebuild_sorted(engine, meta) -> ReplayStats:
    """Index the sorted segments named by ``meta`` (no checkpoint available)."""
    stats = ReplayStats(max_lsn=meta.cut_lsn)
    for (table, group), runs in meta.groups.items():
        tablets = engine.tablets.get(table)
        if not tablets:
            continue
        for run in runs:
            for addr, payload in engine.store.scan(segments=[run.seq]):
                e = codec.decode(payload)
                if not isinstance(e, Stripped):
                    continue
                t = engine.tablet_for(table, e.primary_key)
                t.indexes[group].put(IndexEntry(e.primary_key, e.write_ts, addr, e.lsn, e.value is None))
                stats.max_lsn = max(stats.max_lsn, e.lsn)
                stats.max_ts = max(stats.max_ts, e.write_ts)
    stats.max_txn_id = meta.last_txn_id
    return stats


def _drop_orphans(engine):
    """Delete sorted segments from a compaction that never became current."""
    keep = set(engine.sorted_meta.all_segments())
    orphans = [s for s in engine.store.list_segments(SegmentKind.SORTED) if s not in keep]
    if orphans:
        engine.store.discard_sorted(orphans)
    cut = engine.sorted_meta.cut
    if cut is not None:
        # inputs of a finished compaction whose removal was interrupted
        stale = [s for s in engine.store.list_segments(SegmentKind.ACTIVE_LOG) if s < cut.segment]
        if stale:
            engine.store.remove_segments(stale)
    from .compaction import meta_gen
    for n in os.listdir(engine.compaction_dir):
        g = meta_gen(n)
        if g is not None and g > engine.sorted_meta.gen:
            os.unlink(os.path.join(engine.compaction_dir, n))
