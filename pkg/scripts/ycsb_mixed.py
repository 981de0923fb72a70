"""Update-heavy YCSB-style mixes (95/5 and 75/25) on both engines and key distributions."""

import argparse
import itertools

from logstore import bench


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--records", type=int, default=20_000)
    p.add_argument("--ops", type=int, default=20_000)
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("--fsync", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--csv", default="ycsb_mixed.csv")
    a = p.parse_args()
    for engine, mix, dist in itertools.product(("logstore", "baseline"), ("95/5", "75/25"),
                                               ("zipfian", "uniform")):
        bench.main(["mixed", "--engine", engine, "--mix", mix, "--dist", dist,
                    "--records", str(a.records), "--ops", str(a.ops), "--threads", str(a.threads),
                    "--fsync" if a.fsync else "--no-fsync", "--csv", a.csv])


if __name__ == "__main__":
    main()
