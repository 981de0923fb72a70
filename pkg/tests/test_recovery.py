import os
import shutil

import pytest

from logstore import LogStore, TableSchema
from logstore.codec import Invalidated, LogKey, RowKey, Write
from logstore import codec
from logstore.errors import ChecksumError
from logstore.recovery import POINTER, RecoveryCrash, read_checkpoint

from conftest import fast_config


def reopen(path, **kw):
    return LogStore.open(path, fast_config(**kw))


def state(db, table="t"):
    return dict(db.range_scan(table, None, None))


def seed_db(path, n=100, **kw):
    db = LogStore.open(path, fast_config(**kw))
    db.create_table(TableSchema("t", {"g": ["a"]}))
    for i in range(n):
        db.put("t", b"k%03d" % (i % 40), b"v%d" % i)
    for i in range(0, 40, 7):
        db.delete("t", b"k%03d" % i)
    return db


def test_recover_without_checkpoint_rebuilds_everything(tmp_path):
    db = seed_db(tmp_path)
    want = state(db)
    db.close()
    db = reopen(tmp_path)
    assert state(db) == want
    assert db.recovery_stats.checkpoint is None
    db.close()


def test_checkpoint_then_recover_replays_nothing(tmp_path):
    db = seed_db(tmp_path)
    db.checkpoint()
    want = state(db)
    db.close()
    db = reopen(tmp_path)
    assert state(db) == want
    assert db.recovery_stats.replay.entries_replayed == 0
    db.close()


def test_redo_after_checkpoint_reapplies_later_commits(tmp_path):
    db = seed_db(tmp_path)
    db.checkpoint()
    db.put("t", b"k001", b"later")
    db.delete("t", b"k002")
    want = state(db)
    db.close()
    db = reopen(tmp_path)
    assert state(db) == want
    assert db.recovery_stats.replay.entries_replayed == 2
    db.close()


def test_counters_survive_restart(tmp_path):
    db = seed_db(tmp_path)
    ts = db.authority.current
    lsn = db.lsn
    txn = db.txns.last_txn_id
    db.close()
    db = reopen(tmp_path)
    assert db.authority.current >= ts and db.lsn == lsn and db.txns.last_txn_id >= txn
    t = db.put("t", b"new", b"x")
    assert t > ts
    db.close()


def test_uncommitted_writes_are_ignored(tmp_path):
    db = seed_db(tmp_path, n=10)
    want = state(db)
    # a write whose commit record never reached the log
    e = Write(LogKey(db.next_lsn(), "t", 0), RowKey(b"k001", "g", 10**6), 99999, b"ghost")
    db.store.append(codec.encode(e))
    e = Invalidated(LogKey(db.next_lsn(), "t", 0), RowKey(b"k003", "g", 10**6), 99999)
    db.store.append(codec.encode(e))
    db.close()
    db = reopen(tmp_path)
    assert state(db) == want
    assert db.recovery_stats.replay.uncommitted_skipped == 2
    db.close()


def test_torn_tail_is_truncated(tmp_path):
    db = seed_db(tmp_path, n=10)
    want = state(db)
    seg = db.store.active_segment
    db.put("t", b"torn", b"x" * 100)
    db.close()
    path = tmp_path / "log" / f"{seg:016d}.log"
    os.truncate(path, os.path.getsize(path) - 5)
    db = reopen(tmp_path)
    assert state(db) == want
    assert db.recovery_stats.replay.torn_tail is not None
    db.put("t", b"after", b"ok")
    db.close()
    db = reopen(tmp_path)
    assert db.get("t", b"after") == b"ok"
    assert db.recovery_stats.replay.torn_tail is None
    db.close()


def test_mid_log_corruption_is_fatal(tmp_path):
    db = seed_db(tmp_path, n=10, segment_capacity=256)
    db.close()
    first = sorted(os.listdir(tmp_path / "log"))[0]
    p = tmp_path / "log" / first
    data = bytearray(p.read_bytes())
    data[12] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        reopen(tmp_path, segment_capacity=256)


def test_corrupt_checkpoint_falls_back_to_older(tmp_path):
    db = seed_db(tmp_path)
    first = db.checkpoint()
    db.put("t", b"k001", b"between")
    second = db.checkpoint()
    db.put("t", b"k001", b"last")
    want = state(db)
    db.close()
    p = tmp_path / "checkpoints" / second.name
    data = bytearray(p.read_bytes())
    data[20] ^= 0xFF
    p.write_bytes(bytes(data))
    db = reopen(tmp_path)
    assert db.recovery_stats.checkpoint == first.name
    assert db.recovery_stats.fallbacks == 1
    assert state(db) == want
    db.close()


def test_all_checkpoints_corrupt_falls_back_to_full_scan(tmp_path):
    db = seed_db(tmp_path)
    db.checkpoint()
    want = state(db)
    db.close()
    for n in os.listdir(tmp_path / "checkpoints"):
        (tmp_path / "checkpoints" / n).write_bytes(b"junk")
    db = reopen(tmp_path)
    assert db.recovery_stats.checkpoint is None
    assert state(db) == want
    db.close()


def test_two_checkpoints_latest_wins_and_old_ones_pruned(tmp_path):
    db = seed_db(tmp_path)
    names = [db.checkpoint().name for _ in range(4)]
    db.close()
    assert sorted(os.listdir(tmp_path / "checkpoints")) == names[-2:]
    assert (tmp_path / POINTER).read_text() == names[-1]
    db = reopen(tmp_path)
    assert db.recovery_stats.checkpoint == names[-1]
    db.close()


def test_checkpoint_reuses_clean_index_files(tmp_path):
    db = seed_db(tmp_path)
    a = db.checkpoint()
    b = db.checkpoint()
    assert [f[3] for f in a.index_files] == [f[3] for f in b.index_files]
    db.put("t", b"k001", b"dirty")
    c = db.checkpoint()
    assert [f[3] for f in c.index_files] != [f[3] for f in b.index_files]
    db.close()


def test_block_round_trip_and_checksum(tmp_path):
    db = seed_db(tmp_path, n=5)
    b = db.checkpoint()
    db.close()
    path = tmp_path / "checkpoints" / b.name
    assert read_checkpoint(str(path)) == b
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(ChecksumError):
        read_checkpoint(str(path))


def test_update_count_trigger(tmp_path):
    db = seed_db(tmp_path, n=0, checkpoint_every=10)
    for i in range(25):
        db.put("t", b"k", b"%d" % i)
    assert len(os.listdir(tmp_path / "checkpoints")) == 2
    db.close()


@pytest.mark.parametrize("stage", ["opened", "loaded", "mid-redo", "before-truncate", "done"])
def test_crash_during_recovery_then_recover_again(tmp_path, stage):
    db = seed_db(tmp_path)
    db.checkpoint()
    for i in range(30):
        db.put("t", b"k%03d" % i, b"post%d" % i)
    seg = db.store.active_segment
    want = state(db)
    db.put("t", b"torn", b"x" * 50)
    db.close()
    p = tmp_path / "log" / f"{seg:016d}.log"
    os.truncate(p, os.path.getsize(p) - 3)

    def hook(s):
        if s == stage:
            raise RecoveryCrash(s)

    with pytest.raises(RecoveryCrash):
        LogStore.open(tmp_path, fast_config(), crash_hook=hook)
    db = reopen(tmp_path)
    assert state(db) == want
    db.close()


def test_repeated_recovery_is_idempotent(tmp_path):
    db = seed_db(tmp_path)
    db.checkpoint()
    db.put("t", b"k005", b"x")
    db.close()
    snapshots = []
    for _ in range(3):
        db = reopen(tmp_path)
        snapshots.append((state(db), db.lsn, db.authority.current))
        db.close()
    assert snapshots[0] == snapshots[1] == snapshots[2]


def test_deleted_key_stays_deleted_across_checkpointed_reload(tmp_path):
    db = seed_db(tmp_path, n=10)
    db.put("t", b"gone", b"v")
    db.checkpoint()
    db.delete("t", b"gone")
    db.close()
    db = reopen(tmp_path)
    assert db.get("t", b"gone") is None
    db.checkpoint()
    db.close()
    db = reopen(tmp_path)
    assert db.get("t", b"gone") is None
    db.close()


def test_copy_of_open_directory_recovers(tmp_path):
    db = seed_db(tmp_path / "a")
    want = state(db)
    shutil.copytree(tmp_path / "a", tmp_path / "b")
    db.close()
    db = reopen(tmp_path / "b")
    assert state(db) == want
    db.close()
