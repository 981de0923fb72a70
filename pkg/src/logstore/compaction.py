"""Log compaction: drop obsolete data and re-cluster the rest into sorted segments.

A compaction cuts the log (seals the active segment), decides from a copy of
the indexes which versions survive, merge-sorts those versions by
(table, column group, primary key, timestamp) and writes them as STRIPPED
entries into fresh ``.sorted`` segments, one run of segments per
(table, group).  The swap then remaps every live index entry that points
into the compacted segments, records the new metadata and takes a
checkpoint at the cut so redo never reaches compacted history.

Meta file (``compaction/meta-{gen:08d}``)::

    magic b"LSCM" | payload_len u32 | payload | crc32(payload) u32

The payload is UTF-8 JSON: ``gen``, ``cut`` ([segment, offset]), ``cut_lsn``,
``cut_ts``, ``last_txn_id`` and ``groups``, a list of
``{"table", "group", "runs": [[seq, first_key_hex, last_key_hex, entries]]}``.
"""

from __future__ import annotations

import bisect
import heapq
import json
import os
import re
import struct
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

from . import codec
from .codec import Commit, Invalidated, Stripped, Write
from .errors import ChecksumError, CompactionError
from .mvindex import IndexEntry, MVIndex
from .segment_store import LogAddress, SegmentKind

_META_MAGIC = b"LSCM"
_META_HDR = struct.Struct("<4sI")
_CRC = struct.Struct("<I")
_META_RE = re.compile(r"^meta-(\d{8})$")

LATEST_ONLY = "latest-only"
WATERMARK = "watermark"


@dataclass(frozen=True)
class SortedRun:
    """One sorted segment and the key range it covers."""

    seq: int
    first_key: bytes
    last_key: bytes
    entries: int


@dataclass
class SortedSegmentMeta:
    """Which sorted segments hold which (table, column group), in key order."""

    gen: int = 0
    groups: dict[tuple[str, str], list[SortedRun]] = field(default_factory=dict)
    cut: Optional[LogAddress] = None
    cut_lsn: int = 0
    cut_ts: int = 0
    last_txn_id: int = 0

    def __post_init__(self):
        self._owners = {r.seq: tg for tg, runs in self.groups.items() for r in runs}

    def owner(self, seq: int) -> Optional[tuple[str, str]]:
        return self._owners.get(seq)

    def all_segments(self) -> list[int]:
        return sorted(self._owners)

    def runs_for(self, table: str, group: str) -> list[SortedRun]:
        return self.groups.get((table, group), [])

    def to_json(self) -> dict:
        return {
            "gen": self.gen,
            "cut": None if self.cut is None else [self.cut.segment, self.cut.offset],
            "cut_lsn": self.cut_lsn,
            "cut_ts": self.cut_ts,
            "last_txn_id": self.last_txn_id,
            "groups": [
                {"table": t, "group": g,
                 "runs": [[r.seq, r.first_key.hex(), r.last_key.hex(), r.entries] for r in runs]}
                for (t, g), runs in sorted(self.groups.items())
            ],
        }

    @classmethod
    def from_json(cls, d: Optional[dict]) -> "SortedSegmentMeta":
        if not d:
            return cls()
        groups = {
            (x["table"], x["group"]): [SortedRun(s, bytes.fromhex(a), bytes.fromhex(b), n)
                                       for s, a, b, n in x["runs"]]
            for x in d["groups"]
        }
        cut = None if d["cut"] is None else LogAddress(d["cut"][0], d["cut"][1], 0)
        return cls(d["gen"], groups, cut, d["cut_lsn"], d.get("cut_ts", 0), d["last_txn_id"])

    def to_bytes(self) -> bytes:
        payload = json.dumps(self.to_json(), sort_keys=True).encode()
        return _META_HDR.pack(_META_MAGIC, len(payload)) + payload + _CRC.pack(zlib.crc32(payload))

    @classmethod
    def from_bytes(cls, data: bytes) -> "SortedSegmentMeta":
        if len(data) < _META_HDR.size + _CRC.size:
            raise ChecksumError("compaction meta truncated")
        magic, n = _META_HDR.unpack_from(data)
        if magic != _META_MAGIC or len(data) != _META_HDR.size + n + _CRC.size:
            raise ChecksumError("bad compaction meta header")
        payload = data[_META_HDR.size:_META_HDR.size + n]
        if zlib.crc32(payload) != _CRC.unpack_from(data, _META_HDR.size + n)[0]:
            raise ChecksumError("compaction meta checksum mismatch")
        return cls.from_json(json.loads(payload))


def meta_gen(filename: str) -> Optional[int]:
    m = _META_RE.match(filename)
    return int(m.group(1)) if m else None


def meta_path(engine, gen: int) -> str:
    return os.path.join(engine.compaction_dir, f"meta-{gen:08d}")


def latest_meta(engine) -> Optional[SortedSegmentMeta]:
    """Newest meta file that verifies and whose segments all exist."""
    existing = set(engine.store.list_segments(SegmentKind.SORTED))
    names = sorted((n for n in os.listdir(engine.compaction_dir) if meta_gen(n) is not None), reverse=True)
    for n in names:
        try:
            with open(os.path.join(engine.compaction_dir, n), "rb") as f:
                meta = SortedSegmentMeta.from_bytes(f.read())
        except (OSError, ChecksumError, ValueError, KeyError):
            continue
        if set(meta.all_segments()) <= existing:
            return meta
    return None


# -- retention -----------------------------------------------------------------


@dataclass
class CompactionConfig:
    """``latest-only`` keeps each key's newest version; ``watermark`` also keeps
    every version a read as of ``t >= watermark`` can return."""

    retention: str = LATEST_ONLY
    watermark: int = 0
    # keep what open transactions' snapshots can still read
    respect_open_snapshots: bool = True

    def __post_init__(self):
        if self.retention not in (LATEST_ONLY, WATERMARK):
            raise ValueError(f"unknown retention {self.retention!r}")

    def floor(self, oldest_open: Optional[int]) -> Optional[int]:
        """Oldest timestamp reads must still be answered at (None: latest only)."""
        f = self.watermark if self.retention == WATERMARK else None
        if self.respect_open_snapshots and oldest_open is not None:
            f = oldest_open if f is None else min(f, oldest_open)
        return f


def retained_versions(versions: list[IndexEntry], floor: Optional[int]) -> list[IndexEntry]:
    """Versions (ascending ts) that answer every read at ``t >= floor``; no tombstones."""
    if not versions:
        return []
    if floor is None:
        keep = versions[-1:]
    else:
        i = bisect.bisect_left(versions, floor, key=lambda e: e.ts)
        keep = versions[max(i - 1, 0):]
        if i < len(versions) and versions[i].ts == floor:
            keep = versions[i:]
    return [e for e in keep if not e.tombstone]


def _retained_addresses(indexes: Iterable[tuple[str, str, MVIndex]], floor) -> dict[LogAddress, tuple[str, str]]:
    out: dict[LogAddress, tuple[str, str]] = {}
    for table, group, idx in indexes:
        for k in idx.keys_in(None, None):
            for e in retained_versions(idx.versions(k), floor):
                out[e.addr] = (table, group)
    return out


def _live_indexes(engine):
    for t in engine.all_tablets():
        for g, idx in t.indexes.items():
            yield t.table, g, idx


def _is_data(e) -> bool:
    return isinstance(e, (Write, Invalidated, Stripped))


def estimate_reclaim(engine, segments: Optional[list[int]] = None,
                     config: Optional[CompactionConfig] = None) -> int:
    """Frame bytes of data entries in ``segments`` that compaction would drop."""
    config = config or CompactionConfig()
    with engine.log_lock:
        floor = config.floor(engine.txns.oldest_open_snapshot())
        snaps = [(tb, g, idx.copy()) for tb, g, idx in _live_indexes(engine)]
    keep = _retained_addresses(snaps, floor)
    segs = engine.store.list_segments() if segments is None else list(segments)
    total = 0
    for seq in segs:
        for addr, payload in engine.store.scan(segments=[seq]):
            if addr not in keep and _is_data(codec.decode(payload)):
                total += addr.length
    return total


# -- compaction ----------------------------------------------------------------


@dataclass
class CompactionResult:
    gen: int
    cut: LogAddress
    watermark: int
    inputs: list[int]
    outputs: list[int]
    input_bytes: int = 0
    output_bytes: int = 0
    reclaimed_bytes: int = 0
    entries_in: int = 0
    entries_out: int = 0
    uncommitted_dropped: int = 0
    duration: float = 0.0
    swap_pause: float = 0.0


@dataclass
class CompactionOutput:
    """Sorted segments written but not yet visible; consumed by :func:`swap`."""

    meta: SortedSegmentMeta
    base_gen: int
    inputs: list[int]
    mapping: dict[LogAddress, LogAddress]
    result: CompactionResult
    swapped: bool = False


def prepare(engine, config: Optional[CompactionConfig] = None,
            hook: Optional[Callable[[str], None]] = None) -> CompactionOutput:
    """Cut the log and write the sorted output; serving continues throughout."""
    config = config or CompactionConfig()
    store = engine.store
    t0 = time.perf_counter()
    with engine.log_lock:
        store.seal_and_roll()
        cut = store.end_address()
        cut_lsn, cut_ts = engine.lsn, engine.authority.current
        last_txn = engine.txns.last_txn_id
        floor = config.floor(engine.txns.oldest_open_snapshot())
        snaps = [(tb, g, idx.copy()) for tb, g, idx in _live_indexes(engine)]
        base = engine.sorted_meta
    inputs = sorted(set(s for s in store.list_segments(SegmentKind.ACTIVE_LOG) if s < cut.segment)
                    | set(base.all_segments()))
    keep = _retained_addresses(snaps, floor)
    del snaps

    # one pass per input: commit table plus a sorted run of surviving entries
    committed: set[int] = set()
    runs: list[list] = []
    res = CompactionResult(base.gen + 1, cut, cut_ts if floor is None else floor, inputs, [])
    for seq in inputs:
        run = []
        for addr, payload in store.scan(segments=[seq]):
            res.input_bytes += addr.length
            e = codec.decode(payload)
            if isinstance(e, Commit):
                committed.add(e.txn_id)
                continue
            if not _is_data(e):
                continue
            res.entries_in += 1
            owner = keep.get(addr)
            if owner is None:
                res.reclaimed_bytes += addr.length
                continue
            if isinstance(e, Stripped):
                key, txn = e.primary_key, None
            else:
                key, txn = e.row_key.primary_key, e.txn_id
            ts = e.write_ts if isinstance(e, Stripped) else e.row_key.write_ts
            run.append((owner[0], owner[1], key, ts, e.lsn, txn, e.value, addr))
        run.sort(key=lambda r: r[:4])
        runs.append(run)

    mapping: dict[LogAddress, LogAddress] = {}
    groups: dict[tuple[str, str], list[SortedRun]] = {}
    written: list[int] = []
    writer = None
    cur_group = None
    first = last = None
    count = 0

    def seal():
        nonlocal writer
        if writer is not None:
            writer.close()
            groups.setdefault(cur_group, []).append(SortedRun(writer.seq, first, last, count))
            res.output_bytes += writer.size
            writer = None

    try:
        for table, group, key, ts, lsn, txn, value, addr in heapq.merge(*runs, key=lambda r: r[:4]):
            if txn is not None and txn not in committed:
                res.uncommitted_dropped += 1
                res.reclaimed_bytes += addr.length
                continue
            payload = codec.encode(Stripped(lsn, key, ts, value), engine.config.max_value_size)
            if writer is None or (table, group) != cur_group or not writer.fits(len(payload)):
                seal()
                writer = store.new_sorted_writer()
                written.append(writer.seq)
                cur_group, first, count = (table, group), key, 0
            mapping[addr] = writer.append(payload)
            last = key
            count += 1
            res.entries_out += 1
        seal()
        if hook is not None:
            hook("output-written")
    except BaseException:
        if writer is not None:
            writer.abort()
        store.discard_sorted(written)
        raise

    res.outputs = written
    res.duration = time.perf_counter() - t0
    meta = SortedSegmentMeta(base.gen + 1, groups, cut, cut_lsn, cut_ts, last_txn)
    return CompactionOutput(meta, base.gen, inputs, mapping, res)


def _write_meta(engine, meta: SortedSegmentMeta):
    path = meta_path(engine, meta.gen)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(meta.to_bytes())
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def swap(engine, out: CompactionOutput) -> CompactionResult:
    """Make the sorted output current, checkpoint, then drop the inputs."""
    if out.swapped:
        raise CompactionError("this compaction output was already swapped in")
    t0 = time.perf_counter()
    inputs = set(out.inputs)
    with engine.log_lock:
        if engine.sorted_meta.gen != out.base_gen:
            raise CompactionError("sorted segments changed since this compaction started")
        _write_meta(engine, out.meta)
        for t in engine.all_tablets():
            for g, idx in list(t.indexes.items()):
                new = MVIndex()
                for e in idx:
                    if e.addr.segment in inputs:
                        na = out.mapping.get(e.addr)
                        if na is None:
                            continue
                        e = replace(e, addr=na)
                    new.put(e)
                t.indexes[g] = new
        engine.sorted_meta = out.meta
        out.swapped = True
    out.result.swap_pause = time.perf_counter() - t0
    # outside the log lock: checkpoints take their own lock first
    engine.checkpoint()
    engine.store.remove_segments(out.inputs)
    for n in os.listdir(engine.compaction_dir):
        g = meta_gen(n)
        if g is not None and g < out.meta.gen:
            os.unlink(os.path.join(engine.compaction_dir, n))
    return out.result


def compact(engine, config: Optional[CompactionConfig] = None,
            hook: Optional[Callable[[str], None]] = None) -> CompactionResult:
    """Run one full compaction; ``hook(stage)`` may raise to abort before the swap."""
    if not engine.compaction_lock.acquire(blocking=False):
        raise CompactionError("a compaction is already running")
    try:
        out = prepare(engine, config, hook)
        return swap(engine, out)
    finally:
        engine.compaction_lock.release()
