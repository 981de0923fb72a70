"""Bytes written per byte of user data on load, both engines, several record sizes."""

import argparse

from logstore import bench


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--records", type=int, default=10_000)
    p.add_argument("--sizes", default="128,512,1024,4096")
    p.add_argument("--csv", default="write_amplification.csv")
    a = p.parse_args()
    for size in (int(s) for s in a.sizes.split(",")):
        for engine in ("logstore", "baseline"):
            bench.main(["load", "--engine", engine, "--records", str(a.records),
                        "--record-size", str(size), "--no-fsync", "--csv", a.csv])


if __name__ == "__main__":
    main()
