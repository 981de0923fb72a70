"""In-memory multiversion index: (primary_key, ts) -> log address.

Index file layout (all little-endian)::

    header  magic b"MVIX" | version u32 | count u64 | key_width u16
            | mutation_version u64
    record  key_len u16 | key (padded with zeros to key_width) | ts u64
            | segment u64 | offset u64 | length u32 | lsn u64 | flags u8
    footer  crc32 of header + records, u32

Records are written in ascending (key, ts) order.  flags bit 0 marks a
tombstone.
"""

from __future__ import annotations

import bisect
import os
import struct
import threading
import zlib
from dataclasses import dataclass
from typing import Iterator, Optional

from .errors import ChecksumError, KeyRangeError
from .segment_store import LogAddress

MAGIC = b"MVIX"
FORMAT_VERSION = 1
ENTRY_BYTES = 24  # logical size per entry: 16-byte IdxKey + 8-byte Ptr

_HEADER = struct.Struct("<4sIQHQ")
_TAIL = struct.Struct("<QQQIQB")
_CRC = struct.Struct("<I")


@dataclass(frozen=True, slots=True)
class IndexEntry:
    key: bytes
    ts: int
    addr: LogAddress
    lsn: int
    tombstone: bool = False


@dataclass(frozen=True)
class IndexFileRef:
    path: str
    entries: int
    mutation_version: int


class MVIndex:
    """Ordered map of primary keys to their versions, ascending by ts.

    Keys are kept in a sorted list for range queries; each key maps to a list
    of entries sorted by timestamp.  One lock serializes mutations and
    multi-step reads, so concurrent readers always observe a whole entry.
    """

    def __init__(self):
        self._keys: list[bytes] = []
        self._versions: dict[bytes, list[IndexEntry]] = {}
        self._count = 0
        self._lock = threading.RLock()
        # bumped on every mutation; lets checkpoints reuse clean index files
        self.mutation_version = 0
        self.persisted: Optional[IndexFileRef] = None

    def __len__(self) -> int:
        return self._count

    def entry_count(self) -> int:
        return self._count

    def approx_bytes(self) -> int:
        return self._count * ENTRY_BYTES

    def put(self, entry: IndexEntry) -> bool:
        """Insert ``entry``; an identical (key, ts) is replaced only by a higher lsn."""
        with self._lock:
            vs = self._versions.get(entry.key)
            if vs is None:
                bisect.insort(self._keys, entry.key)
                self._versions[entry.key] = [entry]
                self._count += 1
                self.mutation_version += 1
                return True
            if vs[-1].ts < entry.ts:
                vs.append(entry)
                self._count += 1
                self.mutation_version += 1
                return True
            i = bisect.bisect_left(vs, entry.ts, key=_ts)
            if i < len(vs) and vs[i].ts == entry.ts:
                if entry.lsn <= vs[i].lsn:
                    return False
                vs[i] = entry
            else:
                vs.insert(i, entry)
                self._count += 1
            self.mutation_version += 1
            return True

    def get_latest(self, key: bytes) -> Optional[IndexEntry]:
        vs = self._versions.get(key)
        if not vs:
            return None
        try:
            return vs[-1]
        except IndexError:  # emptied by a concurrent remove
            return None

    def get_as_of(self, key: bytes, t_q: int) -> Optional[IndexEntry]:
        """Newest version with ts <= t_q."""
        with self._lock:
            vs = self._versions.get(key)
            if not vs:
                return None
            i = bisect.bisect_right(vs, t_q, key=_ts)
            return vs[i - 1] if i else None

    def versions(self, key: bytes) -> list[IndexEntry]:
        with self._lock:
            return list(self._versions.get(key, ()))

    def remove_all_versions(self, key: bytes) -> int:
        with self._lock:
            vs = self._versions.pop(key, None)
            if vs is None:
                return 0
            i = bisect.bisect_left(self._keys, key)
            del self._keys[i]
            self._count -= len(vs)
            self.mutation_version += 1
            return len(vs)

    def max_lsn(self, key: bytes) -> int:
        with self._lock:
            vs = self._versions.get(key)
            return max((e.lsn for e in vs), default=0) if vs else 0

    def keys_in(self, start: Optional[bytes], end: Optional[bytes]) -> list[bytes]:
        with self._lock:
            lo = 0 if start is None else bisect.bisect_left(self._keys, start)
            hi = len(self._keys) if end is None else bisect.bisect_left(self._keys, end)
            return self._keys[lo:hi]

    def range(self, start: Optional[bytes], end: Optional[bytes],
              snapshot_ts: Optional[int] = None) -> Iterator[tuple[bytes, IndexEntry]]:
        """Live version as of ``snapshot_ts`` for every key in [start, end).

        ``None`` bounds are open; a ``None`` snapshot means latest.
        """
        if start is not None and end is not None and start > end:
            raise KeyRangeError("range start is after range end")
        for k in self.keys_in(start, end):
            e = self.get_latest(k) if snapshot_ts is None else self.get_as_of(k, snapshot_ts)
            if e is not None and not e.tombstone:
                yield k, e

    def __iter__(self) -> Iterator[IndexEntry]:
        """All entries in ascending (key, ts) order, from a point-in-time copy."""
        with self._lock:
            snap = [(k, list(self._versions[k])) for k in self._keys]
        for _, vs in snap:
            yield from vs

    def copy(self) -> "MVIndex":
        out = MVIndex()
        with self._lock:
            out._keys = list(self._keys)
            out._versions = {k: list(v) for k, v in self._versions.items()}
            out._count = self._count
            out.mutation_version = self.mutation_version
        return out

    def segments_referenced(self) -> set[int]:
        with self._lock:
            return {e.addr.segment for vs in self._versions.values() for e in vs}

    # -- persistence ---------------------------------------------------------

    def snapshot(self) -> tuple[list[IndexEntry], int]:
        """Point-in-time list of all entries plus the mutation version."""
        with self._lock:
            return [e for k in self._keys for e in self._versions[k]], self.mutation_version

    def persist(self, path: str | os.PathLike) -> IndexFileRef:
        snap, mv = self.snapshot()
        ref = write_index_file(path, snap, mv)
        if self.mutation_version == mv:
            self.persisted = ref
        return ref

    @classmethod
    def load(cls, ref: IndexFileRef | str | os.PathLike) -> "MVIndex":
        path = ref.path if isinstance(ref, IndexFileRef) else os.fspath(ref)
        idx = read_index_file(path)
        idx.persisted = IndexFileRef(path, idx._count, idx.mutation_version)
        return idx


def write_index_file(path: str | os.PathLike, snap: list[IndexEntry], mv: int) -> IndexFileRef:
    path = os.fspath(path)
    width = max((len(e.key) for e in snap), default=0)
    rec = struct.Struct(f"<H{width}s")
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(snap), width, mv)]
    for e in snap:
        a = e.addr
        parts.append(rec.pack(len(e.key), e.key))
        parts.append(_TAIL.pack(e.ts, a.segment, a.offset, a.length, e.lsn, 1 if e.tombstone else 0))
    body = b"".join(parts)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(body)
        f.write(_CRC.pack(zlib.crc32(body)))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    return IndexFileRef(path, len(snap), mv)


def read_index_file(path: str) -> MVIndex:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError:
        raise ChecksumError(f"index file {path} is missing") from None
    if len(data) < _HEADER.size + _CRC.size:
        raise ChecksumError(f"index file {path} is truncated")
    body = memoryview(data)[:-_CRC.size]
    (crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"index file {path} failed its checksum")
    magic, ver, count, width, mv = _HEADER.unpack_from(body, 0)
    if magic != MAGIC or ver != FORMAT_VERSION:
        raise ChecksumError(f"index file {path} has a bad header")
    rec = struct.Struct(f"<H{width}s" + _TAIL.format[1:])
    if _HEADER.size + count * rec.size != len(body):
        raise ChecksumError(f"index file {path} has a bad length")
    idx = MVIndex()
    keys = idx._keys
    versions = idx._versions
    prev = None
    for klen, kpad, ts, seg, off, ln, lsn, flags in rec.iter_unpack(body[_HEADER.size:]):
        k = kpad[:klen]
        e = IndexEntry(k, ts, LogAddress(seg, off, ln), lsn, bool(flags & 1))
        if k == prev:
            versions[k].append(e)
        else:
            keys.append(k)
            versions[k] = [e]
            prev = k
    idx._count = count
    idx.mutation_version = mv
    return idx


def _ts(e: IndexEntry) -> int:
    return e.ts
