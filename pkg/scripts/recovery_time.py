"""Restart time with and without a mid-run checkpoint as the log grows."""

import argparse

from logstore import bench


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--ops", default="20000,50000,100000")
    p.add_argument("--records", type=int, default=2_000)
    p.add_argument("--csv", default="recovery_time.csv")
    a = p.parse_args()
    for ops in (int(x) for x in a.ops.split(",")):
        for ck in ("off", "on"):
            bench.main(["recovery-bench", "--with-checkpoint", ck, "--ops", str(ops),
                        "--records", str(a.records), "--record-size", "256", "--no-fsync", "--csv", a.csv])


if __name__ == "__main__":
    main()
