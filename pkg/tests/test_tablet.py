import itertools
import os
import random

import pytest
from hypothesis import given, strategies as st

from logstore import FIFOPolicy, LRUPolicy, TableSchema
from logstore.errors import KeyRangeError, SchemaError
from logstore.tablet import ReadBuffer


def test_lru_evicts_least_recently_used():
    b = ReadBuffer(2, LRUPolicy())
    b.put_if_current("a", 1, b"A", lambda: 1)
    b.put_if_current("b", 1, b"B", lambda: 1)
    b.get("a")
    b.put_if_current("c", 1, b"C", lambda: 1)
    assert b.peek("b") is None and b.peek("a") is not None


def test_fifo_ignores_access_order():
    b = ReadBuffer(2, FIFOPolicy())
    b.put_if_current("a", 1, b"A", lambda: 1)
    b.put_if_current("b", 1, b"B", lambda: 1)
    b.get("a")
    b.put_if_current("c", 1, b"C", lambda: 1)
    assert b.peek("a") is None and b.peek("b") is not None


def test_put_if_current_refuses_stale_version():
    b = ReadBuffer(4)
    b.put_if_current("k", 1, b"old", lambda: 2)
    assert b.peek("k") is None


def test_schema_validation():
    with pytest.raises(SchemaError):
        TableSchema("bad name", {"g": ["a"]})
    with pytest.raises(SchemaError):
        TableSchema("t", {})
    with pytest.raises(SchemaError):
        TableSchema("t", {"g1": ["a"], "g2": ["a"]})
    with pytest.raises(SchemaError):
        TableSchema("t", {"g": ["a"]}, split_keys=[b"m", b"c"])
    s = TableSchema("t", {"g1": ["id", "a"], "g2": ["b"]}, split_keys=[b"m"])
    assert s.columns == ["a", "b"]
    assert TableSchema.from_json(s.to_json()) == s


def test_uncached_get_is_one_storage_read(make_db):
    db = make_db(read_buffer_capacity=0)
    for i in range(50):
        db.put("t", b"k%02d" % i, b"v%d" % i)
    before = db.store.storage_reads
    for i in range(50):
        assert db.get("t", b"k%02d" % i) == b"v%d" % i
    assert db.store.storage_reads - before == 50


def test_cached_get_does_no_storage_read(make_db):
    db = make_db(read_buffer_capacity=10)
    db.put("t", b"k", b"v")
    db.get("t", b"k")
    before = db.store.storage_reads
    assert db.get("t", b"k") == b"v"
    assert db.store.storage_reads == before
    db.put("t", b"k", b"v2")
    assert db.get("t", b"k") == b"v2"
    db.delete("t", b"k")
    assert db.get("t", b"k") is None


def test_split_keys_route_to_tablets(make_db):
    db = make_db(table=False)
    db.create_table(TableSchema("s", {"g": ["a"]}, split_keys=[b"h", b"p"]))
    assert [db.tablet_for("s", k).tablet_id for k in (b"a", b"h", b"o", b"p", b"z")] == [0, 1, 1, 2, 2]
    with pytest.raises(KeyRangeError):
        db.tablets["s"][0].check(b"z", "g")
    for k in (b"a", b"i", b"q"):
        db.put("s", k, k.upper())
    assert [k for k, _ in db.range_scan("s", None, None)] == [b"a", b"i", b"q"]
    assert [k for k, _ in db.range_scan("s", b"b", b"r")] == [b"i", b"q"]


def test_multi_group_requires_group_and_reconstructs(make_db):
    db = make_db(table=False)
    db.create_table(TableSchema("u", {"name": ["first", "last"], "stats": ["visits"]}))
    with pytest.raises(SchemaError):
        db.put("u", b"1", b"x")
    db.put("u", b"1", b"ann", "name")
    db.put("u", b"1", b"7", "stats")
    db.put("u", b"2", b"bob", "name")
    assert db.reconstruct("u", b"1") == {"name": b"ann", "stats": b"7"}
    assert db.reconstruct("u", b"2") == {"name": b"bob", "stats": None}
    assert db.reconstruct("u", b"3") is None


def test_flush_threshold_persists_index_files(make_db):
    db = make_db(flush_threshold=10)
    for i in range(35):
        db.put("t", b"k%d" % (i % 5), b"v")
    t = db.tablets["t"][0]
    assert t.index_files_persisted == 3
    assert len([n for n in os.listdir(db.index_dir) if n.endswith(".idx")]) == 3


def test_get_as_of_and_versions(make_db):
    db = make_db()
    t1 = db.put("t", b"k", b"one")
    t2 = db.put("t", b"k", b"two")
    assert db.get_as_of("t", b"k", t1) == b"one"
    assert db.get_as_of("t", b"k", t2) == b"two"
    assert db.get_as_of("t", b"k", t1 - 1) is None
    assert db.get_versioned("t", b"k") == (b"two", t2)


_dirs = itertools.count()


@given(st.lists(st.tuples(st.integers(0, 15), st.booleans()), max_size=80), st.integers(0, 2**16))
def test_full_scan_matches_oracle(make_db, ops, seed):
    db = make_db(name=f"fs{next(_dirs)}", segment_capacity=512)
    oracle = {}
    for k, is_delete in ops:
        key = b"k%02d" % k
        if is_delete:
            db.delete("t", key)
            oracle.pop(key, None)
        else:
            v = b"v%d" % random.Random(seed + k).randrange(10**6)
            db.put("t", key, v)
            oracle[key] = v
    assert dict(db.full_scan("t")) == oracle
    assert dict(db.range_scan("t", None, None)) == oracle
