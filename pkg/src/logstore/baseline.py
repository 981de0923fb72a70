"""WAL+Data reference engine used as the experimental baseline.

Every write goes to a write-ahead log and into an in-memory sorted buffer.
A full buffer is flushed to an immutable sorted data file, so each record
reaches storage twice.  Data files are split into blocks with one sparse
index entry per block; a point read seeks one block per candidate file.

Record layout (WAL frames and data-file blocks alike)::

    key_len u16 | key | ts u64 | flag u8 (1 = tombstone) | value_len u32 | value

WAL files are framed like the main log (length, crc32).  A data file is a
sequence of blocks followed by a footer::

    blocks | index: count u32, then per block (key_len u16, first_key, offset u64, length u32)
           | index_offset u64 | magic b"BLDF"
"""

from __future__ import annotations

import bisect
import heapq
import os
import re
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, Optional

from .errors import ChecksumError, StoreClosedError
from .segment_store import FRAME_HEADER, frame

_REC = struct.Struct("<QBI")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_BLOCK_REF = struct.Struct("<QI")
_FOOTER = struct.Struct("<Q4s")
_MAGIC = b"BLDF"
_DF_RE = re.compile(r"^data-(\d{8})\.sst$")
_WAL_RE = re.compile(r"^wal-(\d{8})\.log$")

# per-key overhead charged against the buffer budget
_ENTRY_OVERHEAD = 32


@dataclass
class BaselineConfig:
    memtable_bytes: int = 4 * 2**20
    block_size: int = 4096
    # blocks held by the block cache; 0 disables it
    block_cache_blocks: int = 0
    replication_factor: int = 3
    durable_sync: bool = True


def encode_record(key: bytes, ts: int, value: Optional[bytes]) -> bytes:
    v = value or b""
    return _U16.pack(len(key)) + key + _REC.pack(ts, value is None, len(v)) + v


def decode_records(buf: bytes) -> Iterator[tuple[bytes, int, Optional[bytes]]]:
    pos = 0
    n = len(buf)
    while pos < n:
        (kl,) = _U16.unpack_from(buf, pos)
        pos += 2
        key = bytes(buf[pos:pos + kl])
        pos += kl
        ts, tomb, vl = _REC.unpack_from(buf, pos)
        pos += _REC.size
        value = None if tomb else bytes(buf[pos:pos + vl])
        pos += vl
        yield key, ts, value


class DataFile:
    """Immutable sorted run with a sparse (per-block) index held in memory."""

    def __init__(self, path: str, first_keys: list[bytes], blocks: list[tuple[int, int]], last_key: bytes):
        self.path = path
        self.first_keys = first_keys
        self.blocks = blocks
        self.last_key = last_key
        self._fd = os.open(path, os.O_RDONLY)

    @classmethod
    def write(cls, path: str, items: list[tuple[bytes, int, Optional[bytes]]], block_size: int,
              durable: bool) -> tuple["DataFile", int]:
        """Write sorted ``items``; returns the file and the bytes written."""
        out = bytearray()
        first_keys, blocks = [], []
        block = bytearray()
        block_first = None
        for key, ts, value in items:
            rec = encode_record(key, ts, value)
            if block and len(block) + len(rec) > block_size:
                first_keys.append(block_first)
                blocks.append((len(out), len(block)))
                out += block
                block = bytearray()
            if not block:
                block_first = key
            block += rec
        if block:
            first_keys.append(block_first)
            blocks.append((len(out), len(block)))
            out += block
        index_off = len(out)
        out += _U32.pack(len(blocks))
        for fk, (off, ln) in zip(first_keys, blocks):
            out += _U16.pack(len(fk)) + fk + _BLOCK_REF.pack(off, ln)
        out += _FOOTER.pack(index_off, _MAGIC)
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(out)
            f.flush()
            if durable:
                os.fsync(f.fileno())
        os.replace(tmp, path)
        return cls(path, first_keys, blocks, items[-1][0] if items else b""), len(out)

    @classmethod
    def open(cls, path: str) -> "DataFile":
        with open(path, "rb") as f:
            data = f.read()
        if len(data) < _FOOTER.size:
            raise ChecksumError(f"data file {path} truncated")
        index_off, magic = _FOOTER.unpack_from(data, len(data) - _FOOTER.size)
        if magic != _MAGIC:
            raise ChecksumError(f"data file {path} has a bad footer")
        (count,) = _U32.unpack_from(data, index_off)
        pos = index_off + 4
        first_keys, blocks = [], []
        for _ in range(count):
            (kl,) = _U16.unpack_from(data, pos)
            first_keys.append(bytes(data[pos + 2:pos + 2 + kl]))
            pos += 2 + kl
            blocks.append(_BLOCK_REF.unpack_from(data, pos))
            pos += _BLOCK_REF.size
        last_key = b""
        if blocks:
            off, ln = blocks[-1]
            for key, _, _ in decode_records(data[off:off + ln]):
                last_key = key
        return cls(path, first_keys, blocks, last_key)

    def block_for(self, key: bytes) -> Optional[int]:
        if not self.blocks or key < self.first_keys[0] or key > self.last_key:
            return None
        return bisect.bisect_right(self.first_keys, key) - 1

    def read_block(self, i: int) -> bytes:
        off, ln = self.blocks[i]
        return os.pread(self._fd, ln, off)

    def close(self):
        os.close(self._fd)


class BaselineEngine:
    """Single-writer WAL+Data store with concurrent readers."""

    def __init__(self, directory: str | os.PathLike, config: Optional[BaselineConfig] = None):
        self.directory = os.fspath(directory)
        self.config = config or BaselineConfig()
        os.makedirs(self.directory, exist_ok=True)
        self._lock = threading.RLock()
        self._mem: dict[bytes, tuple[int, Optional[bytes]]] = {}
        self._mem_bytes = 0
        self._cache: OrderedDict = OrderedDict()
        self._closed = False
        self.ts = 0

        self.wal_bytes = 0
        self.data_bytes = 0
        self.sync_count = 0
        self.block_reads = 0
        self.cache_hits = 0
        self.flushes = 0

        names = sorted(os.listdir(self.directory))
        self.files: list[DataFile] = [DataFile.open(os.path.join(self.directory, n))
                                      for n in names if _DF_RE.match(n)]
        self._file_gen = max((int(_DF_RE.match(n).group(1)) for n in names if _DF_RE.match(n)), default=0)
        wals = [n for n in names if _WAL_RE.match(n)]
        self._wal_gen = max((int(_WAL_RE.match(n).group(1)) for n in wals), default=0)
        for n in wals:
            self._replay_wal(os.path.join(self.directory, n))
        for f in self.files:
            for i in range(len(f.blocks)):
                for _, ts, _ in decode_records(f.read_block(i)):
                    self.ts = max(self.ts, ts)
        self._wal_path = os.path.join(self.directory, f"wal-{self._wal_gen:08d}.log")
        self._wal_fd = os.open(self._wal_path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)

    def _replay_wal(self, path: str):
        with open(path, "rb") as f:
            data = f.read()
        pos = 0
        while pos + FRAME_HEADER.size <= len(data):
            length, _ = FRAME_HEADER.unpack_from(data, pos)
            end = pos + FRAME_HEADER.size + length
            if end > len(data):
                break
            for key, ts, value in decode_records(data[pos + FRAME_HEADER.size:end]):
                self._mem_insert(key, ts, value)
                self.ts = max(self.ts, ts)
            pos = end

    # -- writes ----------------------------------------------------------------

    def _mem_insert(self, key, ts, value):
        old = self._mem.get(key)
        if old is not None:
            self._mem_bytes -= len(key) + len(old[1] or b"") + _ENTRY_OVERHEAD
        self._mem[key] = (ts, value)
        self._mem_bytes += len(key) + len(value or b"") + _ENTRY_OVERHEAD

    def put(self, key: bytes, value: Optional[bytes]) -> int:
        return self.put_many([(key, value)])

    def delete(self, key: bytes) -> int:
        return self.put_many([(key, None)])

    def put_many(self, items) -> int:
        """Log then buffer every (key, value) pair with one WAL sync; None deletes."""
        if self._closed:
            raise StoreClosedError("baseline engine is closed")
        with self._lock:
            recs = []
            for key, value in items:
                self.ts += 1
                recs.append((bytes(key), self.ts, value))
            buf = b"".join(frame(encode_record(k, t, v)) for k, t, v in recs)
            os.write(self._wal_fd, buf)
            self.wal_bytes += len(buf)
            if self.config.durable_sync:
                os.fsync(self._wal_fd)
            self.sync_count += 1
            for key, ts, value in recs:
                self._mem_insert(key, ts, value)
            # after the whole batch: the WAL being retired holds all of it
            if self._mem_bytes >= self.config.memtable_bytes:
                self.flush()
            return self.ts

    def flush(self):
        """Write the buffer as a new data file and start a fresh WAL."""
        with self._lock:
            if not self._mem:
                return
            items = [(k, ts, v) for k, (ts, v) in sorted(self._mem.items())]
            self._file_gen += 1
            path = os.path.join(self.directory, f"data-{self._file_gen:08d}.sst")
            df, n = DataFile.write(path, items, self.config.block_size, self.config.durable_sync)
            self.files.append(df)
            self.data_bytes += n
            self.flushes += 1
            self._mem.clear()
            self._mem_bytes = 0
            os.close(self._wal_fd)
            os.unlink(self._wal_path)
            self._wal_gen += 1
            self._wal_path = os.path.join(self.directory, f"wal-{self._wal_gen:08d}.log")
            self._wal_fd = os.open(self._wal_path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)

    # -- reads -----------------------------------------------------------------

    def _block(self, f: DataFile, i: int) -> bytes:
        cap = self.config.block_cache_blocks
        ck = (f.path, i)
        if cap:
            b = self._cache.get(ck)
            if b is not None:
                self._cache.move_to_end(ck)
                self.cache_hits += 1
                return b
        b = f.read_block(i)
        self.block_reads += 1
        if cap:
            self._cache[ck] = b
            while len(self._cache) > cap:
                self._cache.popitem(last=False)
        return b

    def get(self, key: bytes) -> Optional[bytes]:
        hit = self._mem.get(key)
        if hit is not None:
            return hit[1]
        for f in reversed(self.files):
            i = f.block_for(key)
            if i is None:
                continue
            for k, _, v in decode_records(self._block(f, i)):
                if k == key:
                    return v
                if k > key:
                    break
        return None

    def _file_iter(self, f: DataFile, start, end):
        i0 = 0 if start is None else max(bisect.bisect_right(f.first_keys, start) - 1, 0)
        for i in range(i0, len(f.blocks)):
            if end is not None and f.first_keys[i] >= end:
                return
            for k, ts, v in decode_records(self._block(f, i)):
                if start is not None and k < start:
                    continue
                if end is not None and k >= end:
                    return
                yield k, ts, v

    def range_scan(self, start: Optional[bytes], end: Optional[bytes]) -> Iterator[tuple[bytes, bytes]]:
        """Live records in [start, end) merged across buffer and files, newest wins."""
        with self._lock:
            mem = sorted((k, ts, v) for k, (ts, v) in self._mem.items()
                         if (start is None or k >= start) and (end is None or k < end))
            files = list(self.files)
        # sort by key, then newest first
        streams = [((k, -ts, v) for k, ts, v in mem)]
        streams += [((k, -ts, v) for k, ts, v in self._file_iter(f, start, end)) for f in files]
        prev = None
        for k, _, v in heapq.merge(*streams):
            if k == prev:
                continue
            prev = k
            if v is not None:
                yield k, v

    # -- accounting ------------------------------------------------------------

    @property
    def bytes_appended(self) -> int:
        return self.wal_bytes + self.data_bytes

    def bytes_written_total(self) -> int:
        return self.bytes_appended * self.config.replication_factor

    def stats(self) -> dict:
        return {
            "bytes_appended": self.bytes_appended,
            "wal_bytes": self.wal_bytes,
            "data_bytes": self.data_bytes,
            "bytes_written_total": self.bytes_written_total(),
            "syncs": self.sync_count,
            "storage_reads": self.block_reads,
            "cache_hits": self.cache_hits,
            "flushes": self.flushes,
            "data_files": len(self.files),
        }

    def close(self, flush: bool = True):
        if self._closed:
            return
        if flush:
            self.flush()
        os.close(self._wal_fd)
        for f in self.files:
            f.close()
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
