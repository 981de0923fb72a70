"""Crash-point injection against a shadow committed-state oracle.

A scripted transactional workload runs once against a real engine.  For
every committed transaction we record where its commit record ends in the
log, and for every checkpoint where the log ended when it was taken.  A
crash at global log byte ``P`` is then simulated on a copy of the directory
by truncating the log at ``P`` and deleting checkpoints taken after ``P``.
The recovered engine must hold exactly the writes of transactions whose
commit record ends at or before ``P``.

Optionally the first recovery attempt is itself crashed at one of the
recovery hook stages and recovery is run again.
"""

from __future__ import annotations

import os
import random
import shutil
import threading
from dataclasses import dataclass, field
from typing import Optional

from .db import EngineConfig, LogStore
from .errors import ConflictError
from .recovery import RecoveryCrash, candidate_checkpoints
from .segment_store import SegmentKind, StoreConfig
from .tablet import TableSchema

RECOVERY_STAGES = ("opened", "loaded", "mid-redo", "before-truncate", "done")
ACCOUNTS = "acct"
KV = "kv"
INITIAL_BALANCE = 1000


@dataclass
class CommittedTxn:
    txn_id: int
    commit_ts: int
    end: int  # global log byte just past the commit record
    writes: dict[tuple[str, bytes], Optional[bytes]]


@dataclass
class WorkloadRecord:
    directory: str
    txns: list[CommittedTxn] = field(default_factory=list)
    checkpoints: list[tuple[int, str]] = field(default_factory=list)
    segment_base: dict[int, int] = field(default_factory=dict)
    total_bytes: int = 0
    accounts: int = 0
    stats: dict = field(default_factory=dict)

    def global_pos(self, seq: int, offset: int) -> int:
        return self.segment_base[seq] + offset


@dataclass
class CrashTrial:
    position: int
    nested_stage: Optional[str]
    matched: bool
    sum_ok: bool
    committed: int
    mismatches: list = field(default_factory=list)


@dataclass
class CrashReport:
    trials: list[CrashTrial]
    workload_stats: dict = field(default_factory=dict)

    @property
    def passed(self) -> int:
        return sum(t.matched and t.sum_ok for t in self.trials)

    @property
    def all_passed(self) -> bool:
        return self.passed == len(self.trials)


def sim_config(**kw) -> EngineConfig:
    """Small segments, no fsync and every checkpoint kept (the injector deletes them)."""
    store = StoreConfig(segment_capacity=kw.pop("segment_capacity", 16 * 1024), durable_sync=False)
    base = dict(store=store, keep_checkpoints=10**6, flush_threshold=kw.pop("flush_threshold", 500))
    base.update(kw)
    return EngineConfig(**base)


def _schemas(accounts: int):
    return [
        TableSchema(ACCOUNTS, {"bal": ["balance"]}),
        TableSchema(KV, {"v": ["value"]}, split_keys=[b"k4", b"k8"]),
    ]


def _acct_key(i: int) -> bytes:
    return b"a%04d" % i


def run_workload(directory: str, ops: int = 2000, seed: int = 0, threads: int = 1,
                 accounts: int = 16, keys: int = 200, checkpoint_every_ops: int = 400,
                 config: Optional[EngineConfig] = None) -> WorkloadRecord:
    """Run the mixed workload and record durability points.

    Operations: transfers between accounts (read two balances, move an
    amount), multi-key transactions on ``kv``, auto-commit puts and deletes,
    and periodic checkpoints.
    """
    config = config or sim_config()
    rec = WorkloadRecord(directory, accounts=accounts)
    db = LogStore.open(directory, config)
    for s in _schemas(accounts):
        db.create_table(s)
    lock = threading.Lock()
    pending: list[tuple] = []

    def record(txn_id, ts, addr, writes):
        if addr is None:  # nothing was written, so nothing reached the log
            return
        with lock:
            pending.append((txn_id, ts, addr, writes))

    init = {(ACCOUNTS, _acct_key(i)): str(INITIAL_BALANCE).encode() for i in range(accounts)}
    with db.begin() as t:
        for (tb, k), v in init.items():
            t.write(tb, k, v)
    record(t.txn_id, t.commit_ts, t.commit_address, init)

    def worker(wid: int, n: int):
        rng = random.Random(seed * 1000 + wid)
        for i in range(n):
            r = rng.random()
            try:
                if r < 0.35:
                    a, b = rng.sample(range(accounts), 2)
                    t = db.begin()
                    ka, kb = _acct_key(a), _acct_key(b)
                    ba = int(t.read(ACCOUNTS, ka))
                    bb = int(t.read(ACCOUNTS, kb))
                    amt = rng.randint(0, 50)
                    w = {(ACCOUNTS, ka): str(ba - amt).encode(), (ACCOUNTS, kb): str(bb + amt).encode()}
                    t.write(ACCOUNTS, ka, w[(ACCOUNTS, ka)])
                    t.write(ACCOUNTS, kb, w[(ACCOUNTS, kb)])
                    t.commit()
                    record(t.txn_id, t.commit_ts, t.commit_address, w)
                elif r < 0.6:
                    t = db.begin()
                    w = {}
                    for k in rng.sample(range(keys), rng.randint(2, 5)):
                        key = b"k%d" % k
                        v = None if rng.random() < 0.2 else b"w%d-%d-%d" % (wid, i, k) * rng.randint(1, 4)
                        if v is None:
                            if t.read(KV, key) is None:
                                continue
                            t.delete(KV, key)
                        else:
                            t.write(KV, key, v)
                        w[(KV, key)] = v
                    t.commit()
                    record(t.txn_id, t.commit_ts, t.commit_address, w)
                else:
                    key = b"k%d" % rng.randrange(keys)
                    if rng.random() < 0.15:
                        reqs = db.txns.autocommit([(KV, key, "v", None)])
                    else:
                        reqs = db.txns.autocommit([(KV, key, "v", b"p%d-%d" % (wid, i))])
                    for q in reqs:
                        if q.writes:
                            record(q.txn_id, q.commit_ts, q.commit_address,
                                   {(KV, key): q.writes[0][3]})
            except ConflictError:
                pass
            if wid == 0 and checkpoint_every_ops and i % checkpoint_every_ops == checkpoint_every_ops - 1:
                b = db.checkpoint()
                with lock:
                    pending.append(("ckpt", b))

    per = ops // threads
    if threads == 1:
        worker(0, per)
    else:
        ts = [threading.Thread(target=worker, args=(w, per)) for w in range(threads)]
        for th in ts:
            th.start()
        for th in ts:
            th.join()
    rec.stats = db.stats()
    db.close()

    base = 0
    store_dir = os.path.join(directory, "log")
    for seq in sorted(int(n.split(".")[0]) for n in os.listdir(store_dir) if n.endswith(".log")):
        rec.segment_base[seq] = base
        base += os.path.getsize(os.path.join(store_dir, f"{seq:016d}.log"))
    rec.total_bytes = base
    for item in pending:
        if item[0] == "ckpt":
            b = item[1]
            rec.checkpoints.append((rec.global_pos(b.log_position.segment, b.log_position.offset), b.name))
        else:
            txn_id, ts, addr, writes = item
            rec.txns.append(CommittedTxn(txn_id, ts, rec.global_pos(addr.segment, addr.end), writes))
    rec.txns.sort(key=lambda c: c.commit_ts)
    return rec


def oracle_state(rec: WorkloadRecord, position: int) -> dict[tuple[str, bytes], bytes]:
    state: dict[tuple[str, bytes], bytes] = {}
    for c in rec.txns:
        if c.end <= position:
            for k, v in c.writes.items():
                if v is None:
                    state.pop(k, None)
                else:
                    state[k] = v
    return state


def crash_copy(rec: WorkloadRecord, position: int, dst: str):
    """Copy the workload directory as it would look after a crash at ``position``."""
    shutil.copytree(rec.directory, dst)
    log_dir = os.path.join(dst, "log")
    for seq, base in rec.segment_base.items():
        path = os.path.join(log_dir, f"{seq:016d}.log")
        size = os.path.getsize(path)
        if base >= position and base > 0:
            os.unlink(path)
        elif base + size > position:
            os.truncate(path, position - base)
    for pos, name in rec.checkpoints:
        if pos > position:
            p = os.path.join(dst, "checkpoints", name)
            if os.path.exists(p):
                os.unlink(p)


def engine_state(db: LogStore) -> dict[tuple[str, bytes], bytes]:
    out = {}
    for table in (ACCOUNTS, KV):
        for k, v in db.range_scan(table, None, None):
            out[(table, k)] = v
    return out


def run_trial(rec: WorkloadRecord, position: int, workdir: str, nested_stage: Optional[str] = None,
              config: Optional[EngineConfig] = None) -> CrashTrial:
    config = config or sim_config()
    dst = os.path.join(workdir, f"crash-{position}-{nested_stage or 'none'}")
    if os.path.exists(dst):
        shutil.rmtree(dst)
    crash_copy(rec, position, dst)
    if nested_stage is not None:
        def hook(stage):
            if stage == nested_stage:
                raise RecoveryCrash(stage)
        try:
            LogStore.open(dst, config, crash_hook=hook).close()
        except RecoveryCrash:
            pass
    db = LogStore.open(dst, config)
    try:
        got = engine_state(db)
    finally:
        db.close()
    want = oracle_state(rec, position)
    mismatches = [(k, want.get(k), got.get(k)) for k in sorted(set(want) | set(got)) if want.get(k) != got.get(k)]
    balances = [int(v) for (tb, _), v in got.items() if tb == ACCOUNTS]
    sum_ok = not balances or sum(balances) == INITIAL_BALANCE * rec.accounts
    shutil.rmtree(dst)
    committed = sum(c.end <= position for c in rec.txns)
    return CrashTrial(position, nested_stage, not mismatches, sum_ok, committed, mismatches[:5])


def crash_positions(rec: WorkloadRecord, count: int, seed: int = 0) -> list[int]:
    """Mix of edge positions, exact commit boundaries and uniform random bytes."""
    rng = random.Random(seed)
    ends = [c.end for c in rec.txns]
    fixed = [0, rec.total_bytes, ends[0] - 1, ends[0]]
    out = list(fixed)
    while len(out) < count:
        r = rng.random()
        if r < 0.3:
            out.append(rng.choice(ends))
        elif r < 0.5:
            out.append(max(0, rng.choice(ends) - rng.randint(1, 40)))
        else:
            out.append(rng.randint(0, rec.total_bytes))
    return out[:count]


def crash_point_injector(directory: str, trials: int = 100, ops: int = 2000, seed: int = 0,
                         threads: int = 1, nested_fraction: float = 0.3,
                         config: Optional[EngineConfig] = None) -> CrashReport:
    """Run the workload once, then ``trials`` simulated crashes against the oracle."""
    src = os.path.join(directory, "source")
    rec = run_workload(src, ops=ops, seed=seed, threads=threads, config=config)
    rng = random.Random(seed + 1)
    results = []
    for p in crash_positions(rec, trials, seed):
        stage = rng.choice(RECOVERY_STAGES) if rng.random() < nested_fraction else None
        results.append(run_trial(rec, p, directory, stage, config))
    return CrashReport(results, rec.stats)
