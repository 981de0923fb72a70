"""Append-only segmented log over a directory.

Every payload is stored as a frame::

    [length: u32 LE][crc32(payload): u32 LE][payload]

Segment files are named ``{seq:016d}.log`` (active log) or ``{seq:016d}.sorted``
(compaction output).  Sequence numbers are unique across both kinds and a
sealed segment is never modified again.
"""

from __future__ import annotations

import enum
import os
import re
import struct
import threading
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional

from .errors import (
    AddressError,
    ChecksumError,
    MissingSegmentError,
    PayloadTooLargeError,
    SegmentInUseError,
    StorageFullError,
    StoreClosedError,
)

FRAME_HEADER = struct.Struct("<II")
FRAME_OVERHEAD = FRAME_HEADER.size

_NAME_RE = re.compile(r"^(\d{16})\.(log|sorted)$")


class SegmentKind(enum.Enum):
    ACTIVE_LOG = "log"
    SORTED = "sorted"


class SyncPolicy(enum.Enum):
    EVERY_APPEND = "every-append"
    EVERY_BATCH = "every-batch"


@dataclass(frozen=True, order=True)
class SegmentId:
    seq: int
    kind: SegmentKind = SegmentKind.ACTIVE_LOG

    @property
    def filename(self) -> str:
        return f"{self.seq:016d}.{self.kind.value}"


@dataclass(frozen=True, order=True, slots=True)
class LogAddress:
    """Physical locator of one frame; ``segment`` is the segment seq."""

    segment: int
    offset: int
    length: int

    @property
    def end(self) -> int:
        return self.offset + self.length


@dataclass
class StoreConfig:
    segment_capacity: int = 64 * 2**20
    sync_policy: SyncPolicy = SyncPolicy.EVERY_BATCH
    replication_factor: int = 3
    # os.fsync on sync(); tests switch it off, the sync counter still ticks
    durable_sync: bool = True
    # 0 means unbounded
    max_total_bytes: int = 0

    def __post_init__(self):
        if self.replication_factor < 1:
            raise ValueError("replication_factor must be >= 1")
        if self.segment_capacity <= FRAME_OVERHEAD:
            raise ValueError("segment_capacity too small")
        if isinstance(self.sync_policy, str):
            self.sync_policy = SyncPolicy(self.sync_policy)


def frame(payload: bytes) -> bytes:
    return FRAME_HEADER.pack(len(payload), zlib.crc32(payload)) + payload


class LogScan:
    """Iterable over ``(LogAddress, payload)``.

    After exhaustion ``torn_tail`` holds the address where an incomplete final
    frame begins (or ``None`` when the log ended cleanly).
    """

    def __init__(self, store: "SegmentStore", segments: list[int], start_offset: int):
        self._store = store
        self._segments = segments
        self._start_offset = start_offset
        self.torn_tail: Optional[LogAddress] = None
        self.bytes_scanned = 0

    def __iter__(self) -> Iterator[tuple[LogAddress, bytes]]:
        last = len(self._segments) - 1
        for i, seq in enumerate(self._segments):
            data = self._store._read_whole(seq)
            pos = self._start_offset if i == 0 else 0
            n = len(data)
            while pos < n:
                if pos + FRAME_OVERHEAD > n:
                    yield from self._tail(seq, pos, i == last)
                    return
                length, crc = FRAME_HEADER.unpack_from(data, pos)
                end = pos + FRAME_OVERHEAD + length
                if end > n:
                    yield from self._tail(seq, pos, i == last)
                    return
                payload = bytes(data[pos + FRAME_OVERHEAD:end])
                if zlib.crc32(payload) != crc:
                    raise ChecksumError(f"checksum mismatch in segment {seq} at offset {pos}")
                self.bytes_scanned += end - pos
                yield LogAddress(seq, pos, end - pos), payload
                pos = end

    def _tail(self, seq, pos, is_last):
        if not is_last:
            raise ChecksumError(f"incomplete frame inside sealed segment {seq} at offset {pos}")
        self.torn_tail = LogAddress(seq, pos, 1)
        return iter(())


class SortedSegmentWriter:
    """Writes one compaction output segment; sealed on close()."""

    def __init__(self, store: "SegmentStore", seq: int):
        self.store = store
        self.seq = seq
        self._path = store._path(SegmentId(seq, SegmentKind.SORTED))
        self._fd = os.open(self._path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
        self.size = 0
        self._chunks: list[bytes] = []

    def fits(self, payload_len: int) -> bool:
        return self.size + FRAME_OVERHEAD + payload_len <= self.store.config.segment_capacity

    def append(self, payload: bytes) -> LogAddress:
        f = frame(payload)
        addr = LogAddress(self.seq, self.size, len(f))
        self._chunks.append(f)
        self.size += len(f)
        if len(self._chunks) >= 512:
            self._drain()
        return addr

    def _drain(self):
        if self._chunks:
            buf = b"".join(self._chunks)
            os.write(self._fd, buf)
            self.store._account(len(buf))
            self._chunks = []

    def close(self):
        self._drain()
        self.store._fsync(self._fd)
        os.close(self._fd)
        self.store._register_sorted(self.seq, self.size)

    def abort(self):
        os.close(self._fd)
        try:
            os.unlink(self._path)
        except FileNotFoundError:
            pass


class SegmentStore:
    """Directory of segment files presenting one append-only log.

    Appends are serialized by the caller; reads and scans may run concurrently
    with appends.
    """

    def __init__(self, directory: str | os.PathLike, config: Optional[StoreConfig] = None):
        self.directory = os.fspath(directory)
        self.config = config or StoreConfig()
        os.makedirs(self.directory, exist_ok=True)
        self._lock = threading.Lock()
        self._closed = False
        self._sizes: dict[int, int] = {}
        self._kinds: dict[int, SegmentKind] = {}
        self._read_fds: dict[int, int] = {}
        self._retired_fds: list[int] = []
        self.is_referenced: Callable[[int], bool] = lambda seq: False
        self._high_seq = -1

        self.bytes_appended = 0
        self.append_count = 0
        self.sync_count = 0
        self.storage_reads = 0
        self.read_trace: Optional[list[LogAddress]] = None

        for name in sorted(os.listdir(self.directory)):
            m = _NAME_RE.match(name)
            if not m:
                continue
            seq = int(m.group(1))
            self._kinds[seq] = SegmentKind(m.group(2))
            self._sizes[seq] = os.path.getsize(os.path.join(self.directory, name))

        active = self._active_segments()
        if active:
            self._active_seq = active[-1]
        else:
            self._active_seq = self._next_seq()
            self._kinds[self._active_seq] = SegmentKind.ACTIVE_LOG
            self._sizes[self._active_seq] = 0
        self._active_fd = self._open_active(self._active_seq)

    # -- naming / bookkeeping ------------------------------------------------

    def _path(self, sid: SegmentId) -> str:
        return os.path.join(self.directory, sid.filename)

    def _seg_path(self, seq: int) -> str:
        return self._path(SegmentId(seq, self._kinds[seq]))

    def _next_seq(self) -> int:
        # numbers of discarded segments are never handed out again
        self._high_seq = max(self._high_seq, max(self._kinds, default=-1)) + 1
        return self._high_seq

    def _active_segments(self) -> list[int]:
        return sorted(s for s, k in self._kinds.items() if k is SegmentKind.ACTIVE_LOG)

    def _open_active(self, seq: int) -> int:
        return os.open(self._seg_path(seq), os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)

    def _account(self, n: int):
        self.bytes_appended += n

    def _fsync(self, fd: int):
        if self.config.durable_sync:
            os.fsync(fd)

    def _check_open(self):
        if self._closed:
            raise StoreClosedError("segment store is closed")

    # -- writes --------------------------------------------------------------

    @property
    def active_segment(self) -> int:
        return self._active_seq

    def end_address(self) -> LogAddress:
        """Position where the next active-log append would begin."""
        return LogAddress(self._active_seq, self._sizes[self._active_seq], 0)

    def append(self, payload: bytes) -> LogAddress:
        return self.append_many([payload])[0]

    def append_many(self, payloads: Iterable[bytes]) -> list[LogAddress]:
        """Append frames contiguously; one write call per touched segment."""
        self._check_open()
        cap = self.config.segment_capacity
        payloads = list(payloads)
        need = 0
        for p in payloads:
            if len(p) + FRAME_OVERHEAD > cap:
                raise PayloadTooLargeError(f"payload of {len(p)} bytes exceeds segment capacity")
            need += len(p) + FRAME_OVERHEAD
        quota = self.config.max_total_bytes
        if quota and self.bytes_appended + need > quota:
            raise StorageFullError("storage quota exhausted")
        addrs: list[LogAddress] = []
        pending: list[bytes] = []
        size = self._sizes[self._active_seq]
        for p in payloads:
            n = len(p) + FRAME_OVERHEAD
            if size + n > cap:
                self._write_pending(pending)
                pending = []
                self.seal_and_roll()
                size = 0
            addrs.append(LogAddress(self._active_seq, size, n))
            pending.append(frame(p))
            size += n
            if self.config.sync_policy is SyncPolicy.EVERY_APPEND:
                self._write_pending(pending)
                pending = []
                self.sync()
        self._write_pending(pending)
        return addrs

    def _write_pending(self, pending: list[bytes]):
        if not pending:
            return
        buf = b"".join(pending)
        os.write(self._active_fd, buf)
        self._sizes[self._active_seq] += len(buf)
        self.append_count += len(pending)
        self._account(len(buf))

    def sync(self):
        self._check_open()
        self._fsync(self._active_fd)
        self.sync_count += 1

    def seal_and_roll(self) -> SegmentId:
        """Seal the active segment and open a fresh one; returns the sealed id."""
        self._check_open()
        with self._lock:
            sealed = self._active_seq
            self._fsync(self._active_fd)
            os.close(self._active_fd)
            seq = self._next_seq()
            self._kinds[seq] = SegmentKind.ACTIVE_LOG
            self._sizes[seq] = 0
            self._active_fd = self._open_active(seq)
            self._active_seq = seq
        return SegmentId(sealed, SegmentKind.ACTIVE_LOG)

    def new_sorted_writer(self) -> SortedSegmentWriter:
        self._check_open()
        with self._lock:
            seq = self._next_seq()
            # reserve the number while the writer is open
            self._kinds[seq] = SegmentKind.SORTED
            self._sizes[seq] = 0
        return SortedSegmentWriter(self, seq)

    def _register_sorted(self, seq: int, size: int):
        self._sizes[seq] = size

    def discard_sorted(self, seqs: Iterable[int]):
        """Drop sorted segments that never became visible (failed compaction)."""
        with self._lock:
            for seq in seqs:
                if self._kinds.get(seq) is SegmentKind.SORTED:
                    self._forget(seq)

    def truncate_active(self, offset: int):
        """Cut a torn tail off the active segment (recovery only)."""
        os.close(self._active_fd)
        os.truncate(self._seg_path(self._active_seq), offset)
        self._sizes[self._active_seq] = offset
        self._active_fd = self._open_active(self._active_seq)

    # -- reads ---------------------------------------------------------------

    def _fd_for(self, seq: int) -> int:
        fd = self._read_fds.get(seq)
        if fd is None:
            with self._lock:
                fd = self._read_fds.get(seq)
                if fd is None:
                    if seq not in self._kinds:
                        raise MissingSegmentError(f"segment {seq} does not exist")
                    try:
                        fd = os.open(self._seg_path(seq), os.O_RDONLY)
                    except FileNotFoundError:
                        raise MissingSegmentError(f"segment {seq} does not exist") from None
                    self._read_fds[seq] = fd
        return fd

    def read(self, addr: LogAddress) -> bytes:
        self._check_open()
        fd = self._fd_for(addr.segment)
        size = self._sizes.get(addr.segment)
        if size is not None and addr.offset + addr.length > size:
            raise AddressError(f"{addr} beyond end of segment ({size} bytes)")
        data = os.pread(fd, addr.length, addr.offset)
        self.storage_reads += 1
        if self.read_trace is not None:
            self.read_trace.append(addr)
        if len(data) != addr.length or addr.length < FRAME_OVERHEAD:
            raise AddressError(f"short read at {addr}")
        length, crc = FRAME_HEADER.unpack_from(data, 0)
        if length != addr.length - FRAME_OVERHEAD:
            raise ChecksumError(f"frame length mismatch at {addr}")
        payload = data[FRAME_OVERHEAD:]
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"checksum mismatch at {addr}")
        return payload

    def _read_whole(self, seq: int) -> bytes:
        if seq not in self._kinds:
            raise MissingSegmentError(f"segment {seq} does not exist")
        with open(self._seg_path(seq), "rb") as f:
            return f.read()

    def scan(self, start: Optional[LogAddress] = None,
             kind: SegmentKind = SegmentKind.ACTIVE_LOG,
             segments: Optional[list[int]] = None) -> LogScan:
        """Scan frames in log order starting at ``start`` (a frame boundary)."""
        self._check_open()
        if segments is None:
            segs = sorted(s for s, k in self._kinds.items() if k is kind)
        else:
            segs = list(segments)
        offset = 0
        if start is not None:
            segs = [s for s in segs if s >= start.segment]
            if segs and segs[0] == start.segment:
                offset = start.offset
        return LogScan(self, segs, offset)

    # -- segment management --------------------------------------------------

    def list_segments(self, kind: Optional[SegmentKind] = None) -> list[int]:
        return sorted(s for s, k in self._kinds.items() if kind is None or k is kind)

    def segment_kind(self, seq: int) -> SegmentKind:
        return self._kinds[seq]

    def segment_size(self, seq: int) -> int:
        return self._sizes[seq]

    def remove_segments(self, seqs: Iterable[int]):
        seqs = list(seqs)
        for seq in seqs:
            if seq not in self._kinds:
                raise MissingSegmentError(f"segment {seq} does not exist")
            if seq == self._active_seq:
                raise SegmentInUseError(f"segment {seq} is the active segment")
            if self.is_referenced(seq):
                raise SegmentInUseError(f"segment {seq} is still referenced")
        with self._lock:
            for seq in seqs:
                self._forget(seq)

    def _forget(self, seq: int):
        path = self._seg_path(seq)
        fd = self._read_fds.pop(seq, None)
        if fd is not None:
            # readers may still hold this fd; unlinked files stay readable
            self._retired_fds.append(fd)
        del self._kinds[seq]
        self._sizes.pop(seq, None)
        try:
            os.unlink(path)
        except FileNotFoundError:
            pass

    def bytes_written_total(self) -> int:
        return self.bytes_appended * self.config.replication_factor

    def close(self):
        if self._closed:
            return
        self._fsync(self._active_fd)
        os.close(self._active_fd)
        for fd in list(self._read_fds.values()) + self._retired_fds:
            os.close(fd)
        self._read_fds.clear()
        self._retired_fds.clear()
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
