import random
import threading

import pytest
from hypothesis import given, strategies as st

from logstore import CompactionConfig, LogStore, TableSchema
from logstore import codec
from logstore.codec import Commit, LogKey, RowKey, Stripped, Write
from logstore.compaction import prepare, retained_versions, swap
from logstore.errors import CompactionError
from logstore.mvindex import IndexEntry
from logstore.segment_store import LogAddress, SegmentKind

from conftest import fast_config


def state(db, table="t"):
    return dict(db.range_scan(table, None, None))


def churn(db, n=300, keys=40, seed=1, delete_every=9):
    rng = random.Random(seed)
    oracle = {}
    for i in range(n):
        k = b"k%03d" % rng.randrange(keys)
        if i % delete_every == 0:
            db.delete("t", k)
            oracle.pop(k, None)
        else:
            v = b"v%d-" % i + bytes(rng.randrange(40))
            db.put("t", k, v)
            oracle[k] = v
    return oracle


def data_frames(db, segments):
    """(addr, entry) for every data entry in ``segments``, decoded independently."""
    out = []
    for seq in segments:
        for addr, payload in db.store.scan(segments=[seq]):
            e = codec.decode(payload)
            if not isinstance(e, Commit):
                out.append((addr, e))
    return out


def test_overwritten_key_leaves_one_entry(make_db):
    db = make_db(segment_capacity=1024)
    for i in range(3):
        db.put("t", b"k", b"v%d" % i)
    res = db.compact()
    assert res.entries_out == 1
    sorted_entries = data_frames(db, db.store.list_segments(SegmentKind.SORTED))
    assert [e.value for _, e in sorted_entries] == [b"v2"]
    assert all(isinstance(e, Stripped) for _, e in sorted_entries)
    assert db.get("t", b"k") == b"v2"


def test_deleted_key_is_gone(make_db):
    db = make_db(segment_capacity=1024)
    db.put("t", b"a", b"1")
    db.put("t", b"b", b"2")
    db.delete("t", b"a")
    db.compact()
    keys = [e.primary_key for _, e in data_frames(db, db.store.list_segments(SegmentKind.SORTED))]
    assert keys == [b"b"]
    assert db.get("t", b"a") is None
    assert db.tablets["t"][0].index("g").versions(b"a") == []


def test_differential_before_and_after(make_db):
    db = make_db(segment_capacity=2048)
    oracle = churn(db, 600)
    wm = db.authority.current - 150
    before_as_of = {(k, t): db.get_as_of("t", b"k%03d" % k, t) for k in range(40)
                    for t in (wm, wm + 40, db.authority.current)}
    before_range = list(db.range_scan("t", b"k010", b"k030"))
    db.compact(CompactionConfig("watermark", watermark=wm))
    assert state(db) == oracle
    for (k, t), v in before_as_of.items():
        assert db.get_as_of("t", b"k%03d" % k, t) == v
    assert list(db.range_scan("t", b"k010", b"k030")) == before_range
    assert dict(db.full_scan("t")) == oracle


def test_latest_only_drops_history(make_db):
    db = make_db(segment_capacity=2048)
    t1 = db.put("t", b"k", b"one")
    db.put("t", b"k", b"two")
    db.compact()
    assert db.get_as_of("t", b"k", t1) is None
    assert db.get("t", b"k") == b"two"


def test_watermark_keeps_version_visible_at_watermark(make_db):
    db = make_db(segment_capacity=2048)
    t1 = db.put("t", b"k", b"one")
    t2 = db.put("t", b"k", b"two")
    t3 = db.put("t", b"k", b"three")
    res = db.compact(CompactionConfig("watermark", watermark=t2))
    assert res.entries_out == 2
    assert db.get_as_of("t", b"k", t1) is None
    assert db.get_as_of("t", b"k", t2) == b"two"
    assert db.get_as_of("t", b"k", t3) == b"three"


def test_sorted_runs_are_clustered(make_db):
    db = make_db(segment_capacity=1024, read_buffer_capacity=0)
    order = list(range(200))
    random.Random(3).shuffle(order)
    for i in order:
        db.put("t", b"k%04d" % i, b"x" * 30)
    res = db.compact()
    assert len(res.outputs) > 1
    meta = db.sorted_meta
    runs = meta.runs_for("t", "g")
    # runs cover disjoint ascending key ranges
    for a, b in zip(runs, runs[1:]):
        assert a.last_key < b.first_key
    db.store.read_trace = []
    got = list(db.range_scan("t", None, None))
    assert len(got) == 200
    trace = db.store.read_trace
    assert [a.segment for a in trace] == sorted(a.segment for a in trace)
    for seq in res.outputs:
        offs = [a.offset for a in trace if a.segment == seq]
        assert offs == sorted(offs)


def test_reclaimed_bytes_match_independent_recount(make_db):
    db = make_db(segment_capacity=2048)
    churn(db, 500)
    # orphaned writes: never committed
    for i in range(3):
        e = Write(LogKey(db.next_lsn(), "t", 0), RowKey(b"ghost%d" % i, "g", 10**9 + i), 10**7 + i, b"z" * 10)
        db.store.append(codec.encode(e))
    # recount from raw frames: keep only the newest entry of keys whose newest entry is a live write
    frames = data_frames(db, db.store.list_segments())
    committed = {codec.decode(p).txn_id for _, p in db.store.scan() if isinstance(codec.decode(p), Commit)}
    newest = {}
    for addr, e in frames:
        if e.txn_id not in committed:
            continue
        k = e.row_key.primary_key
        if k not in newest or (e.row_key.write_ts, e.lsn) > newest[k][0]:
            newest[k] = ((e.row_key.write_ts, e.lsn), addr, e)
    keep = {addr for _, addr, e in newest.values() if isinstance(e, Write)}
    expected = sum(a.length for a, _ in frames if a not in keep)
    estimate = db.estimate_reclaim()
    res = db.compact()
    assert res.reclaimed_bytes == expected
    # uncommitted entries are never indexed, so both counts include them
    assert estimate == expected
    assert res.entries_out == len(keep)


def test_estimate_zero_without_overwrites(make_db):
    db = make_db(segment_capacity=4096)
    for i in range(100):
        db.put("t", b"k%03d" % i, b"x" * 50)
    assert db.estimate_reclaim() == 0
    assert db.compact().reclaimed_bytes == 0


def test_estimate_half_when_every_key_written_twice(make_db):
    db = make_db(segment_capacity=4096)
    for rnd in range(2):
        for i in range(100):
            db.put("t", b"k%03d" % i, b"%d" % rnd + b"x" * 49)
    data = sum(a.length for a, _ in data_frames(db, db.store.list_segments()))
    assert db.estimate_reclaim() == data // 2


def test_second_compaction_reclaims_sorted_segments(make_db):
    db = make_db(segment_capacity=2048)
    churn(db, 300, seed=5)
    first = db.compact()
    churn(db, 300, seed=6)
    oracle = state(db)
    second = db.compact()
    assert set(first.outputs) <= set(second.inputs)
    assert state(db) == oracle
    assert not set(first.outputs) & set(db.store.list_segments())


def test_double_swap_and_stale_generation_rejected(make_db):
    db = make_db(segment_capacity=2048)
    churn(db, 100)
    a = prepare(db)
    swap(db, a)
    with pytest.raises(CompactionError):
        swap(db, a)
    churn(db, 50, seed=9)
    b = prepare(db)
    c = prepare(db)
    swap(db, c)
    with pytest.raises(CompactionError):
        swap(db, b)


def test_failure_before_swap_keeps_old_state(make_db):
    db = make_db(segment_capacity=2048)
    oracle = churn(db, 300)
    segs = db.store.list_segments()

    def hook(stage):
        raise RuntimeError(stage)

    with pytest.raises(RuntimeError):
        db.compact(hook=hook)
    assert state(db) == oracle
    assert db.store.list_segments(SegmentKind.SORTED) == []
    assert set(segs) <= set(db.store.list_segments())
    db.compact()
    assert state(db) == oracle


def test_crash_between_output_and_swap_recovers_old_state(tmp_path):
    db = LogStore.open(tmp_path, fast_config(segment_capacity=2048))
    db.create_table(TableSchema("t", {"g": ["a"]}))
    oracle = churn(db, 300)
    prepare(db)  # output on disk, never swapped in
    db.close()
    db = LogStore.open(tmp_path, fast_config(segment_capacity=2048))
    assert state(db) == oracle
    assert db.store.list_segments(SegmentKind.SORTED) == []
    db.close()


def test_crash_after_swap_before_input_removal(tmp_path):
    db = LogStore.open(tmp_path, fast_config(segment_capacity=2048))
    db.create_table(TableSchema("t", {"g": ["a"]}))
    oracle = churn(db, 300)
    out = prepare(db)
    real_remove = db.store.remove_segments
    db.store.remove_segments = lambda segs: None
    swap(db, out)
    db.store.remove_segments = real_remove
    db.close()
    db = LogStore.open(tmp_path, fast_config(segment_capacity=2048))
    assert state(db) == oracle
    assert not set(out.inputs) & set(db.store.list_segments(SegmentKind.ACTIVE_LOG))
    db.close()


def test_compacted_store_survives_restart(tmp_path):
    cfg = fast_config(segment_capacity=2048)
    db = LogStore.open(tmp_path, cfg)
    db.create_table(TableSchema("t", {"g": ["a"]}))
    churn(db, 300)
    db.compact()
    db.put("t", b"k001", b"post")
    oracle = state(db)
    db.close()
    db = LogStore.open(tmp_path, cfg)
    assert state(db) == oracle
    db.close()


def test_reads_during_compaction(make_db):
    db = make_db(segment_capacity=2048, read_buffer_capacity=0)
    oracle = churn(db, 400, delete_every=10**9)
    stop = threading.Event()
    errors = []

    def reader():
        rng = random.Random(0)
        keys = sorted(oracle)
        while not stop.is_set():
            k = rng.choice(keys)
            if db.get("t", k) != oracle[k]:
                errors.append(k)

    ths = [threading.Thread(target=reader) for _ in range(4)]
    for t in ths:
        t.start()
    for _ in range(3):
        db.compact()
    stop.set()
    for t in ths:
        t.join()
    assert not errors


def test_writes_during_compaction_survive(make_db):
    db = make_db(segment_capacity=2048)
    churn(db, 200)

    def hook(stage):
        db.put("t", b"during", b"yes")

    db.compact(hook=hook)
    assert db.get("t", b"during") == b"yes"


def test_concurrent_compaction_refused(make_db):
    db = make_db(segment_capacity=2048)
    churn(db, 100)
    inner = []

    def hook(stage):
        with pytest.raises(CompactionError):
            db.compact()
        inner.append(stage)

    db.compact(hook=hook)
    assert inner == ["output-written"]


def test_open_snapshot_keeps_its_versions(make_db):
    db = make_db(segment_capacity=2048)
    db.put("t", b"k", b"old")
    t = db.begin()
    db.put("t", b"k", b"new")
    db.compact()
    assert t.read("t", b"k") == b"old"
    t.commit()
    db.compact()
    assert db.get("t", b"k") == b"new"
    assert len(db.tablets["t"][0].index("g").versions(b"k")) == 1


def _e(ts, tomb=False):
    return IndexEntry(b"k", ts, LogAddress(0, ts, 1), ts, tomb)


# the index only holds a tombstone as a key's oldest version: delete drops the rest
@given(st.lists(st.integers(1, 50), min_size=1, max_size=12, unique=True), st.booleans(),
       st.none() | st.integers(0, 55))
def test_retained_versions_answer_every_read_above_floor(stamps, tomb_first, floor):
    stamps.sort()
    versions = [_e(ts, tomb_first and i == 0) for i, ts in enumerate(stamps)]
    kept = retained_versions(versions, floor)
    assert not any(e.tombstone for e in kept)

    def visible(pool, t):
        older = [e for e in pool if e.ts <= t and not e.tombstone]
        return older[-1] if older else None

    lo = stamps[-1] if floor is None else floor
    for t in range(lo, 60):
        assert visible(kept, t) == visible(versions, t)
    assert len(kept) <= len(versions)
