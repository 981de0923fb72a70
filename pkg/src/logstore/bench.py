"""Benchmark harness comparing the log-only engine with the WAL+Data baseline.

Usage::

    python -m logstore <subcommand> [--engine logstore|baseline] [options]

Every run prints a short summary and, with ``--csv PATH``, appends one row
per phase to PATH with the columns of :data:`CSV_FIELDS`.
"""

from __future__ import annotations

import argparse
import csv
import os
import shutil
import sys
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from .baseline import BaselineConfig, BaselineEngine
from .compaction import CompactionConfig
from .db import EngineConfig, LogStore
from .errors import ConflictError
from .segment_store import StoreConfig
from .tablet import TableSchema
from .workload import WorkloadSpec, parse_mix

TABLE = "usertable"
GROUP = "fields"


@dataclass
class MetricsReport:
    subcommand: str
    engine: str
    phase: str
    ops: int = 0
    seconds: float = 0.0
    throughput: float = 0.0
    p50_ms: float = 0.0
    p95_ms: float = 0.0
    p99_ms: float = 0.0
    bytes_appended: int = 0
    bytes_written_total: int = 0
    storage_reads: int = 0
    syncs: int = 0
    recovery_seconds: float = 0.0
    redo_replayed: int = 0
    note: str = ""

    @classmethod
    def from_latencies(cls, sub, engine, phase, lat: list[float], seconds: float, **kw) -> "MetricsReport":
        r = cls(sub, engine, phase, ops=len(lat), seconds=seconds, **kw)
        if lat:
            a = np.asarray(lat) * 1000.0
            r.p50_ms, r.p95_ms, r.p99_ms = (float(x) for x in np.percentile(a, [50, 95, 99]))
        r.throughput = len(lat) / seconds if seconds > 0 else 0.0
        return r

    def summary(self) -> str:
        s = f"[{self.engine}] {self.subcommand}/{self.phase}: {self.ops} ops in {self.seconds:.3f}s"
        if self.ops:
            s += f" ({self.throughput:.0f} ops/s, p50 {self.p50_ms:.3f} ms, p99 {self.p99_ms:.3f} ms)"
        s += f", appended {self.bytes_appended} B, reads {self.storage_reads}, syncs {self.syncs}"
        if self.recovery_seconds:
            s += f", recovery {self.recovery_seconds:.3f}s, redo {self.redo_replayed}"
        if self.note:
            s += f" [{self.note}]"
        return s


CSV_FIELDS = [f.name for f in fields(MetricsReport)]


# -- engine adapters -----------------------------------------------------------


class LogStoreClient:
    name = "logstore"

    def __init__(self, directory: str, args):
        self.args = args
        self.directory = directory
        self.db = LogStore.open(directory, self._config(args))
        self.db.create_table(TableSchema(TABLE, {GROUP: ["field0"]}))

    @staticmethod
    def _config(args) -> EngineConfig:
        return EngineConfig(
            store=StoreConfig(segment_capacity=args.segment_bytes, durable_sync=args.fsync),
            read_buffer_capacity=args.records if args.cache == "on" else 0,
            flush_threshold=args.flush_threshold,
            checkpoint_every=args.checkpoint_every,
        )

    def put_many(self, items):
        self.db.put_many(items, group=GROUP, table=TABLE)

    def put(self, key, value):
        self.db.put(TABLE, key, value, GROUP)

    def get(self, key):
        return self.db.get(TABLE, key, GROUP)

    def range_scan(self, start, end):
        return self.db.range_scan(TABLE, start, end, GROUP)

    def full_scan(self):
        return self.db.full_scan(TABLE, GROUP)

    def counters(self) -> dict:
        s = self.db.stats()
        return dict(bytes_appended=s["bytes_appended"], bytes_written_total=s["bytes_written_total"],
                    storage_reads=s["storage_reads"], syncs=s["syncs"])

    def finish_load(self):
        pass

    def reopen(self):
        self.db.close()
        t0 = time.perf_counter()
        self.db = LogStore.open(self.directory, self._config(self.args))
        return time.perf_counter() - t0

    def close(self):
        self.db.close()


class BaselineClient:
    name = "baseline"

    def __init__(self, directory: str, args):
        self.args = args
        self.directory = directory
        self.db = BaselineEngine(directory, self._config(args))

    @staticmethod
    def _config(args) -> BaselineConfig:
        blocks = max(1, args.records * args.record_size // 4096 + 1) if args.cache == "on" else 0
        return BaselineConfig(memtable_bytes=args.memtable_bytes, block_cache_blocks=blocks,
                              durable_sync=args.fsync)

    def put_many(self, items):
        self.db.put_many(items)

    def put(self, key, value):
        self.db.put(key, value)

    def get(self, key):
        return self.db.get(key)

    def range_scan(self, start, end):
        return self.db.range_scan(start, end)

    def full_scan(self):
        return self.db.range_scan(None, None)

    def counters(self) -> dict:
        s = self.db.stats()
        return dict(bytes_appended=s["bytes_appended"], bytes_written_total=s["bytes_written_total"],
                    storage_reads=s["storage_reads"], syncs=s["syncs"])

    def finish_load(self):
        self.db.flush()

    def reopen(self):
        self.db.close(flush=False)
        t0 = time.perf_counter()
        self.db = BaselineEngine(self.directory, self._config(self.args))
        return time.perf_counter() - t0

    def close(self):
        self.db.close()


def make_client(args, directory: str):
    if args.engine == "logstore":
        return LogStoreClient(directory, args)
    return BaselineClient(directory, args)


# -- phases --------------------------------------------------------------------


def spec_from(args) -> WorkloadSpec:
    return WorkloadSpec(record_count=args.records, record_size=args.record_size,
                        update_pct=parse_mix(args.mix), distribution=args.dist, theta=args.theta,
                        op_count=args.ops, warmup_ops=args.warmup, seed=args.seed)


def load(client, spec: WorkloadSpec, keys: list[bytes], batch: int = 100) -> tuple[float, list[float]]:
    lat = []
    t0 = time.perf_counter()
    for i in range(0, len(keys), batch):
        s = time.perf_counter()
        client.put_many([(k, spec.value(i + j)) for j, k in enumerate(keys[i:i + batch])])
        lat.append(time.perf_counter() - s)
    client.finish_load()
    return time.perf_counter() - t0, lat


def _delta(after: dict, before: dict) -> dict:
    return {k: after[k] - before[k] for k in after}


def timed_ops(client, ops: list[tuple[str, int]], keys, spec, threads: int = 1,
              scan_length: int = 0) -> tuple[float, list[float]]:
    lat: list[float] = []
    lock = threading.Lock()

    def run(chunk):
        local = []
        for i, (op, rank) in enumerate(chunk):
            s = time.perf_counter()
            key = keys[rank]
            if op == "read":
                client.get(key)
            elif op == "update":
                client.put(key, spec.value(rank, i + 1))
            elif op == "scan":
                end = keys[min(rank + scan_length, len(keys) - 1)] if rank + scan_length < len(keys) else None
                for _ in client.range_scan(key, end):
                    pass
            local.append(time.perf_counter() - s)
        with lock:
            lat.extend(local)

    t0 = time.perf_counter()
    if threads <= 1:
        run(ops)
    else:
        parts = [ops[i::threads] for i in range(threads)]
        ts = [threading.Thread(target=run, args=(p,)) for p in parts]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
    return time.perf_counter() - t0, lat


def _report(args, phase, seconds, lat, before, client, **kw) -> MetricsReport:
    return MetricsReport.from_latencies(args.subcommand, client.name, phase, lat, seconds,
                                        **_delta(client.counters(), before), **kw)


def cmd_load(args, client, spec, keys):
    before = client.counters()
    secs, lat = load(client, spec, keys)
    r = _report(args, "load", secs, lat, before, client)
    r.ops = len(keys)
    r.throughput = len(keys) / secs
    data = len(keys) * spec.record_size
    r.note = f"bytes/data={r.bytes_appended / data:.3f}"
    return [r]


def cmd_read_random(args, client, spec, keys):
    load(client, spec, keys)
    ch = spec.chooser()
    warm = [("read", int(r)) for r in ch.sample(args.warmup)]
    timed_ops(client, warm, keys, spec)
    ops = [("read", int(r)) for r in ch.sample(args.ops)]
    before = client.counters()
    secs, lat = timed_ops(client, ops, keys, spec, args.threads)
    r = _report(args, f"read-cache-{args.cache}", secs, lat, before, client)
    r.note = f"reads/op={r.storage_reads / max(1, r.ops):.3f}"
    return [r]


def cmd_scan_seq(args, client, spec, keys):
    load(client, spec, keys)
    before = client.counters()
    t0 = time.perf_counter()
    n = sum(1 for _ in client.full_scan())
    secs = time.perf_counter() - t0
    r = _report(args, "scan-seq", secs, [], before, client)
    r.ops = n
    r.throughput = n / secs if secs else 0.0
    return [r]


def _scan_ops(args, spec, keys):
    ch = spec.chooser(seed_offset=3)
    hi = max(1, len(keys) - args.scan_length)
    return [("scan", int(r) % hi) for r in ch.sample(args.ops)]


def cmd_scan_range(args, client, spec, keys):
    load(client, spec, keys)
    before = client.counters()
    secs, lat = timed_ops(client, _scan_ops(args, spec, keys), keys, spec, scan_length=args.scan_length)
    return [_report(args, "scan-range", secs, lat, before, client, note=f"length={args.scan_length}")]


def cmd_mixed(args, client, spec, keys):
    load(client, spec, keys)
    timed_ops(client, list(spec.operations(args.warmup, seed_offset=11)), keys, spec)
    before = client.counters()
    secs, lat = timed_ops(client, list(spec.operations()), keys, spec, args.threads)
    return [_report(args, f"mixed-u{spec.update_pct}", secs, lat, before, client,
                    note=f"dist={spec.distribution} threads={args.threads}")]


def cmd_txn_mixed(args, client, spec, keys):
    if client.name != "logstore":
        raise SystemExit("txn-mixed needs --engine logstore (the baseline has no transactions)")
    load(client, spec, keys)
    db = client.db
    out = []
    for phase, rmw in (("read-only", False), ("read-modify-write", True)):
        ch = spec.chooser(seed_offset=17 if rmw else 13)
        picks = ch.sample(args.ops * args.txn_size).reshape(args.ops, args.txn_size)
        lat: list[float] = []
        lock = threading.Lock()
        aborts = [0]

        def run(rows):
            local, ab = [], 0
            for row in rows:
                s = time.perf_counter()
                try:
                    with db.begin() as t:
                        for r in row.tolist():
                            v = t.read(TABLE, keys[r], GROUP)
                            if rmw:
                                t.write(TABLE, keys[r], (v or b"")[:-1] + b"!", GROUP)
                except ConflictError:
                    ab += 1
                local.append(time.perf_counter() - s)
            with lock:
                lat.extend(local)
                aborts[0] += ab

        before = client.counters()
        parts = [picks[i::args.threads] for i in range(args.threads)]
        t0 = time.perf_counter()
        ts = [threading.Thread(target=run, args=(p,)) for p in parts]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        secs = time.perf_counter() - t0
        out.append(_report(args, phase, secs, lat, before, client,
                           note=f"aborts={aborts[0]} txn_size={args.txn_size}"))
    return out


def _updates(client, spec, keys, n, seed_offset=21):
    ops = [("update", int(r)) for r in spec.chooser(seed_offset).sample(n)]
    timed_ops(client, ops, keys, spec)


def cmd_checkpoint_bench(args, client, spec, keys):
    if client.name != "logstore":
        raise SystemExit("checkpoint-bench needs --engine logstore")
    load(client, spec, keys)
    _updates(client, spec, keys, args.ops)
    db = client.db
    out = []
    before = client.counters()
    t0 = time.perf_counter()
    block = db.checkpoint()
    w = time.perf_counter() - t0
    out.append(_report(args, "checkpoint-write", w, [], before, client,
                       note=f"index_files={len(block.index_files)} flush_threshold={args.flush_threshold}"))
    _updates(client, spec, keys, args.ops // 2, seed_offset=23)
    rec = client.reopen()
    st = db_stats = client.db.recovery_stats
    out.append(_report(args, "checkpoint-reload", rec, [], client.counters(), client,
                       recovery_seconds=rec, redo_replayed=st.replay.entries_replayed,
                       note=f"checkpoint={db_stats.checkpoint}"))
    return out


def cmd_recovery_bench(args, client, spec, keys):
    if client.name != "logstore":
        raise SystemExit("recovery-bench needs --engine logstore")
    load(client, spec, keys)
    half = args.ops // 2
    _updates(client, spec, keys, half)
    if args.with_checkpoint == "on":
        client.db.checkpoint()
    _updates(client, spec, keys, args.ops - half, seed_offset=29)
    secs = client.reopen()
    st = client.db.recovery_stats
    return [_report(args, f"recover-ckpt-{args.with_checkpoint}", secs, [], client.counters(), client,
                    recovery_seconds=secs, redo_replayed=st.replay.entries_replayed,
                    note=f"scanned={st.replay.entries_scanned}")]


def cmd_compact(args, client, spec, keys):
    if client.name != "logstore":
        raise SystemExit("compact needs --engine logstore")
    load(client, spec, keys)
    _updates(client, spec, keys, args.ops)
    ops = _scan_ops(args, spec, keys)
    out = []
    before = client.counters()
    secs, lat = timed_ops(client, ops, keys, spec, scan_length=args.scan_length)
    out.append(_report(args, "scan-range-before", secs, lat, before, client))
    before = client.counters()
    res = client.db.compact(CompactionConfig())
    out.append(_report(args, "compaction", res.duration + res.swap_pause, [], before, client,
                       note=f"reclaimed={res.reclaimed_bytes} in={res.input_bytes} out={res.output_bytes}"))
    before = client.counters()
    secs, lat = timed_ops(client, ops, keys, spec, scan_length=args.scan_length)
    out.append(_report(args, "scan-range-after", secs, lat, before, client))
    return out


COMMANDS: dict[str, Callable] = {
    "load": cmd_load,
    "read-random": cmd_read_random,
    "scan-seq": cmd_scan_seq,
    "scan-range": cmd_scan_range,
    "mixed": cmd_mixed,
    "txn-mixed": cmd_txn_mixed,
    "checkpoint-bench": cmd_checkpoint_bench,
    "recovery-bench": cmd_recovery_bench,
    "compact": cmd_compact,
}


# -- CLI -----------------------------------------------------------------------


def read_config_file(path: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; keys use flag spelling."""
    out = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SystemExit(f"{path}:{n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="logstore-bench", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=sorted(COMMANDS))
    p.add_argument("--engine", choices=["logstore", "baseline"], default="logstore")
    p.add_argument("--dir", default=None, help="engine directory (default: a temporary one)")
    p.add_argument("--records", type=int, default=10_000)
    p.add_argument("--record-size", type=int, default=1024)
    p.add_argument("--ops", type=int, default=5_000)
    p.add_argument("--warmup", type=int, default=1_000)
    p.add_argument("--mix", default="95/5", help="update/read percentages, e.g. 95/5 or 75/25")
    p.add_argument("--dist", choices=["zipfian", "uniform"], default="zipfian")
    p.add_argument("--theta", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--segment-bytes", type=int, default=4 * 2**20)
    p.add_argument("--memtable-bytes", type=int, default=4 * 2**20)
    p.add_argument("--flush-threshold", type=int, default=10_000)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--cache", choices=["on", "off"], default="on")
    p.add_argument("--with-checkpoint", choices=["on", "off"], default="on")
    p.add_argument("--scan-length", type=int, default=100)
    p.add_argument("--txn-size", type=int, default=4)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--fsync", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--config", default=None, help="key = value file; flags override it")
    p.add_argument("--csv", default=None, help="append result rows to this CSV file")
    return p


def parse_args(argv=None) -> argparse.Namespace:
    p = build_parser()
    args = p.parse_args(argv)
    if args.config:
        known = {a.dest: a for a in p._actions}
        cfg = read_config_file(args.config)
        for k in cfg:
            if k not in known or k in ("subcommand", "config"):
                raise SystemExit(f"{args.config}: unknown setting {k!r}")
        p.set_defaults(**{k: _coerce(known[k], v) for k, v in cfg.items()})
        args = p.parse_args(argv)
    return args


def _coerce(action, value: str):
    if isinstance(action, argparse.BooleanOptionalAction):
        return value.lower() in ("1", "true", "yes", "on")
    return action.type(value) if action.type else value


def write_csv(path: str, reports: list[MetricsReport]):
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        if new:
            w.writeheader()
        for r in reports:
            w.writerow(asdict(r))


def run(args) -> list[MetricsReport]:
    spec = spec_from(args)
    keys = spec.keys()
    tmp = None
    directory = args.dir
    if directory is None:
        tmp = directory = tempfile.mkdtemp(prefix=f"{args.engine}-")
    elif os.path.exists(directory) and os.listdir(directory):
        raise SystemExit(f"{directory} is not empty; pick a fresh --dir")
    try:
        client = make_client(args, directory)
        try:
            return COMMANDS[args.subcommand](args, client, spec, keys)
        finally:
            client.close()
    finally:
        if tmp is not None:
            shutil.rmtree(tmp, ignore_errors=True)


def main(argv=None) -> int:
    args = parse_args(argv)
    reports = run(args)
    for r in reports:
        print(r.summary())
    if args.csv:
        write_csv(args.csv, reports)
    return 0


if __name__ == "__main__":
    sys.exit(main())
