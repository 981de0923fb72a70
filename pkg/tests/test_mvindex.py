import threading

import pytest
from hypothesis import given, strategies as st

from logstore.errors import ChecksumError, KeyRangeError
from logstore.mvindex import IndexEntry, MVIndex, read_index_file
from logstore.segment_store import LogAddress


def ent(key, ts, lsn=None, tomb=False, seg=0):
    return IndexEntry(key, ts, LogAddress(seg, ts * 10, 10), ts if lsn is None else lsn, tomb)


def test_as_of_is_inclusive():
    idx = MVIndex()
    for ts in (3, 7, 9):
        idx.put(ent(b"k", ts))
    assert idx.get_as_of(b"k", 2) is None
    assert idx.get_as_of(b"k", 7).ts == 7
    assert idx.get_as_of(b"k", 8).ts == 7
    assert idx.get_latest(b"k").ts == 9


def test_lsn_rule_on_same_version():
    idx = MVIndex()
    assert idx.put(ent(b"k", 5, lsn=10))
    assert not idx.put(IndexEntry(b"k", 5, LogAddress(1, 0, 1), 9))
    assert not idx.put(IndexEntry(b"k", 5, LogAddress(1, 0, 1), 10))
    assert idx.put(IndexEntry(b"k", 5, LogAddress(2, 0, 1), 11))
    assert idx.get_latest(b"k").addr.segment == 2
    assert len(idx) == 1


def test_out_of_order_insert_keeps_versions_sorted():
    idx = MVIndex()
    for ts in (5, 1, 3):
        idx.put(ent(b"k", ts))
    assert [e.ts for e in idx.versions(b"k")] == [1, 3, 5]


def test_range_skips_tombstones_and_checks_bounds():
    idx = MVIndex()
    idx.put(ent(b"a", 1))
    idx.put(ent(b"b", 2))
    idx.put(ent(b"b", 3, tomb=True))
    idx.put(ent(b"c", 4))
    assert [k for k, _ in idx.range(None, None)] == [b"a", b"c"]
    assert [k for k, _ in idx.range(None, None, snapshot_ts=2)] == [b"a", b"b"]
    assert [k for k, _ in idx.range(b"b", b"c")] == []
    with pytest.raises(KeyRangeError):
        list(idx.range(b"z", b"a"))


def test_persist_round_trip_and_crc(tmp_path):
    idx = MVIndex()
    idx.put(ent(b"short", 1))
    idx.put(ent(b"a-much-longer-key", 2, tomb=True))
    idx.put(ent(b"short", 3))
    ref = idx.persist(tmp_path / "i.idx")
    assert ref.entries == 3 and idx.persisted == ref
    back = MVIndex.load(ref)
    assert list(back) == list(idx)
    data = bytearray((tmp_path / "i.idx").read_bytes())
    data[30] ^= 1
    (tmp_path / "i.idx").write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        read_index_file(str(tmp_path / "i.idx"))


def test_persisted_ref_dropped_on_mutation(tmp_path):
    idx = MVIndex()
    idx.put(ent(b"k", 1))
    ref = idx.persist(tmp_path / "i.idx")
    assert idx.mutation_version == ref.mutation_version
    idx.put(ent(b"k", 2))
    assert idx.mutation_version != ref.mutation_version


def test_concurrent_readers_see_whole_entries():
    idx = MVIndex()
    stop = threading.Event()
    bad = []

    def reader():
        while not stop.is_set():
            e = idx.get_latest(b"k")
            if e is not None and e.addr.offset != e.ts * 10:
                bad.append(e)

    th = threading.Thread(target=reader)
    th.start()
    for ts in range(1, 3000):
        idx.put(ent(b"k", ts))
        if ts % 100 == 0:
            idx.remove_all_versions(b"k")
    stop.set()
    th.join()
    assert not bad


# model: key -> {ts: (lsn, tombstone)}
ops = st.lists(st.tuples(
    st.sampled_from(["put", "tomb", "remove"]),
    st.sampled_from([b"a", b"b", b"c", b"d"]),
    st.integers(min_value=1, max_value=30),
    st.integers(min_value=1, max_value=50),
), max_size=60)


@given(ops, st.integers(min_value=0, max_value=32))
def test_matches_naive_model(script, t_q):
    idx = MVIndex()
    model: dict[bytes, dict[int, tuple[int, bool]]] = {}
    for op, k, ts, lsn in script:
        if op == "remove":
            idx.remove_all_versions(k)
            model.pop(k, None)
            continue
        tomb = op == "tomb"
        idx.put(IndexEntry(k, ts, LogAddress(0, lsn, 1), lsn, tomb))
        vs = model.setdefault(k, {})
        if ts not in vs or vs[ts][0] < lsn:
            vs[ts] = (lsn, tomb)
    assert len(idx) == sum(len(v) for v in model.values())
    for k in [b"a", b"b", b"c", b"d"]:
        vs = model.get(k, {})
        older = [ts for ts in vs if ts <= t_q]
        got = idx.get_as_of(k, t_q)
        if older:
            want = max(older)
            assert (got.ts, got.lsn, got.tombstone) == (want, *vs[want])
        else:
            assert got is None
        assert [e.ts for e in idx.versions(k)] == sorted(vs)
    live = sorted(k for k, vs in model.items() if vs and not vs[max(vs)][1])
    assert [k for k, _ in idx.range(None, None)] == live
