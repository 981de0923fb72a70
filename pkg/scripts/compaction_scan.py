"""Range-scan latency before and after compaction, plus reclaimed bytes."""

import argparse

from logstore import bench


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--records", type=int, default=20_000)
    p.add_argument("--ops", type=int, default=40_000, help="updates before compacting")
    p.add_argument("--scan-length", type=int, default=100)
    p.add_argument("--csv", default="compaction_scan.csv")
    a = p.parse_args()
    bench.main(["compact", "--records", str(a.records), "--ops", str(a.ops), "--record-size", "256",
                "--scan-length", str(a.scan_length), "--cache", "off", "--no-fsync", "--csv", a.csv])


if __name__ == "__main__":
    main()
