import csv
import subprocess
import sys

import pytest

from logstore import bench

SMALL = ["--records", "200", "--record-size", "64", "--ops", "200", "--warmup", "20", "--no-fsync"]


@pytest.mark.parametrize("sub", sorted(bench.COMMANDS))
def test_every_subcommand_runs_on_logstore(sub, tmp_path):
    args = bench.parse_args([sub, "--dir", str(tmp_path / "d"), *SMALL, "--segment-bytes", "8192"])
    reports = bench.run(args)
    assert reports and all(r.engine == "logstore" for r in reports)


@pytest.mark.parametrize("sub", ["load", "read-random", "scan-seq", "scan-range", "mixed"])
def test_baseline_subcommands(sub, tmp_path):
    args = bench.parse_args([sub, "--engine", "baseline", "--dir", str(tmp_path / "d"), *SMALL,
                             "--memtable-bytes", "4096"])
    assert bench.run(args)


def test_logstore_only_commands_refuse_baseline(tmp_path):
    args = bench.parse_args(["compact", "--engine", "baseline", *SMALL])
    with pytest.raises(SystemExit):
        bench.run(args)


def test_load_writes_each_record_once_vs_twice(tmp_path):
    big = [*SMALL, "--record-size", "1024"]
    log = bench.run(bench.parse_args(["load", *big]))[0]
    base = bench.run(bench.parse_args(["load", "--engine", "baseline", "--memtable-bytes", "65536", *big]))[0]
    assert log.bytes_appended < 1.2 * 200 * 1024
    assert base.bytes_appended >= 2 * 200 * 1024


def test_uncached_random_reads_cost_one_read_each():
    reports = bench.run(bench.parse_args(["read-random", "--cache", "off", *SMALL]))
    r = [x for x in reports if x.ops][-1]
    assert r.storage_reads == r.ops


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "b.conf"
    cfg.write_text("# bench settings\nrecords = 123\nmix = 75/25\nfsync = off\n")
    a = bench.parse_args(["load", "--config", str(cfg)])
    assert a.records == 123 and a.mix == "75/25" and a.fsync is False
    b = bench.parse_args(["load", "--config", str(cfg), "--records", "7"])
    assert b.records == 7
    cfg.write_text("bogus = 1\n")
    with pytest.raises(SystemExit):
        bench.parse_args(["load", "--config", str(cfg)])


def test_csv_appends_rows(tmp_path):
    out = tmp_path / "r.csv"
    assert bench.main(["load", *SMALL, "--csv", str(out)]) == 0
    assert bench.main(["load", *SMALL, "--csv", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 2 and set(rows[0]) == set(bench.CSV_FIELDS)


def test_nonempty_dir_refused(tmp_path):
    (tmp_path / "x").write_text("")
    with pytest.raises(SystemExit):
        bench.run(bench.parse_args(["load", "--dir", str(tmp_path), *SMALL]))


def test_module_entry_point():
    p = subprocess.run([sys.executable, "-m", "logstore", "load", *SMALL],
                       capture_output=True, text=True, timeout=60)
    assert p.returncode == 0 and "load" in p.stdout
