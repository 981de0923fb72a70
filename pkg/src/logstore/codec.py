"""Log entry wire format.

All integers are little-endian and fixed width; strings are UTF-8 with a u16
length prefix, keys are raw bytes with a u16 length prefix and values carry a
u32 length prefix.  The first byte is the variant tag::

    WRITE       0x01  lsn u64 | table str | tablet u32 | key bytes | group str
                      | write_ts u64 | txn_id u64 | value (u32 len + bytes)
    INVALIDATED 0x02  lsn u64 | table str | tablet u32 | key bytes | group str
                      | write_ts u64 | txn_id u64
    COMMIT      0x03  lsn u64 | table str | tablet u32 | txn_id u64 | commit_ts u64
    STRIPPED    0x04  lsn u64 | key bytes | write_ts u64 | has_value u8
                      | [value (u32 len + bytes)]

STRIPPED entries live in sorted segments only; table and column group come
from the compaction metadata instead of being repeated in every entry.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Union

from .errors import CodecError

TAG_WRITE = 1
TAG_INVALIDATED = 2
TAG_COMMIT = 3
TAG_STRIPPED = 4

MAX_KEY = 0xFFFF
DEFAULT_MAX_VALUE = 16 * 2**20

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_HEAD = struct.Struct("<BQ")  # tag, lsn
_TS_TXN = struct.Struct("<QQ")


@dataclass(frozen=True, slots=True)
class LogKey:
    lsn: int
    table: str
    tablet: int


@dataclass(frozen=True, slots=True)
class RowKey:
    primary_key: bytes
    column_group: str
    write_ts: int


@dataclass(frozen=True, slots=True)
class Write:
    log_key: LogKey
    row_key: RowKey
    txn_id: int
    value: bytes

    @property
    def lsn(self) -> int:
        return self.log_key.lsn


@dataclass(frozen=True, slots=True)
class Invalidated:
    log_key: LogKey
    row_key: RowKey
    txn_id: int

    @property
    def lsn(self) -> int:
        return self.log_key.lsn

    @property
    def value(self) -> None:
        return None


@dataclass(frozen=True, slots=True)
class Commit:
    log_key: LogKey
    txn_id: int
    commit_ts: int

    @property
    def lsn(self) -> int:
        return self.log_key.lsn


@dataclass(frozen=True, slots=True)
class Stripped:
    lsn: int
    primary_key: bytes
    write_ts: int
    value: Optional[bytes]


LogEntry = Union[Write, Invalidated, Commit, Stripped]


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > MAX_KEY:
        raise CodecError("string field too long")
    return _U16.pack(len(b)) + b


def _key(k: bytes) -> bytes:
    if len(k) > MAX_KEY:
        raise CodecError("primary key too long")
    return _U16.pack(len(k)) + k


def encode(entry: LogEntry, max_value: int = DEFAULT_MAX_VALUE) -> bytes:
    if isinstance(entry, (Write, Invalidated)):
        lk, rk = entry.log_key, entry.row_key
        parts = [
            _HEAD.pack(TAG_WRITE if isinstance(entry, Write) else TAG_INVALIDATED, lk.lsn),
            _str(lk.table), _U32.pack(lk.tablet),
            _key(rk.primary_key), _str(rk.column_group),
            _TS_TXN.pack(rk.write_ts, entry.txn_id),
        ]
        if isinstance(entry, Write):
            if entry.value is None:
                raise CodecError("Write entry requires a value; use Invalidated for deletes")
            if len(entry.value) > max_value:
                raise CodecError(f"value of {len(entry.value)} bytes exceeds limit {max_value}")
            parts.append(_U32.pack(len(entry.value)))
            parts.append(bytes(entry.value))
        return b"".join(parts)
    if isinstance(entry, Commit):
        lk = entry.log_key
        return b"".join([
            _HEAD.pack(TAG_COMMIT, lk.lsn), _str(lk.table), _U32.pack(lk.tablet),
            _TS_TXN.pack(entry.txn_id, entry.commit_ts),
        ])
    if isinstance(entry, Stripped):
        parts = [_HEAD.pack(TAG_STRIPPED, entry.lsn), _key(entry.primary_key), _U64.pack(entry.write_ts)]
        if entry.value is None:
            parts.append(_U8.pack(0))
        else:
            if len(entry.value) > max_value:
                raise CodecError(f"value of {len(entry.value)} bytes exceeds limit {max_value}")
            parts += [_U8.pack(1), _U32.pack(len(entry.value)), bytes(entry.value)]
        return b"".join(parts)
    raise CodecError(f"cannot encode {type(entry).__name__}")


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, st: struct.Struct):
        try:
            v = st.unpack_from(self.buf, self.pos)
        except struct.error:
            raise CodecError("truncated entry") from None
        self.pos += st.size
        return v

    def raw(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise CodecError("truncated entry")
        b = bytes(self.buf[self.pos:end])
        self.pos = end
        return b

    def str(self) -> str:
        (n,) = self.take(_U16)
        try:
            return self.raw(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CodecError("malformed string field") from None

    def key(self) -> bytes:
        (n,) = self.take(_U16)
        return self.raw(n)

    def done(self):
        if self.pos != len(self.buf):
            raise CodecError("trailing bytes after entry")


def decode(payload: bytes) -> LogEntry:
    r = _Reader(payload)
    tag, lsn = r.take(_HEAD)
    if tag in (TAG_WRITE, TAG_INVALIDATED):
        table = r.str()
        (tablet,) = r.take(_U32)
        pk = r.key()
        group = r.str()
        ts, txn = r.take(_TS_TXN)
        lk, rk = LogKey(lsn, table, tablet), RowKey(pk, group, ts)
        if tag == TAG_WRITE:
            (n,) = r.take(_U32)
            entry: LogEntry = Write(lk, rk, txn, r.raw(n))
        else:
            entry = Invalidated(lk, rk, txn)
    elif tag == TAG_COMMIT:
        table = r.str()
        (tablet,) = r.take(_U32)
        txn, cts = r.take(_TS_TXN)
        entry = Commit(LogKey(lsn, table, tablet), txn, cts)
    elif tag == TAG_STRIPPED:
        pk = r.key()
        (ts,) = r.take(_U64)
        (flag,) = r.take(_U8)
        if flag == 0:
            value = None
        elif flag == 1:
            (n,) = r.take(_U32)
            value = r.raw(n)
        else:
            raise CodecError(f"bad value flag {flag}")
        entry = Stripped(lsn, pk, ts, value)
    else:
        raise CodecError(f"unknown variant tag {tag}")
    r.done()
    return entry


def write_overhead(table: str, key: bytes, group: str) -> int:
    """Encoded size of a Write entry minus its value bytes."""
    return (_HEAD.size + 2 + len(table.encode()) + 4 + 2 + len(key)
            + 2 + len(group.encode()) + _TS_TXN.size + 4)


def commit_size(table: str = "") -> int:
    return _HEAD.size + 2 + len(table.encode()) + 4 + _TS_TXN.size
