"""Randomized crash points against the committed-state oracle."""

import argparse
import collections
import tempfile
import time

from logstore.crashsim import crash_point_injector, sim_config


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--ops", type=int, default=5_000)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--commit-delay", type=float, default=0.0)
    a = p.parse_args()
    with tempfile.TemporaryDirectory() as d:
        t0 = time.perf_counter()
        rep = crash_point_injector(d, trials=a.trials, ops=a.ops, seed=a.seed, threads=a.threads,
                                   config=sim_config(commit_delay=a.commit_delay))
        el = time.perf_counter() - t0
    stages = collections.Counter(t.nested_stage or "-" for t in rep.trials)
    print(f"{rep.passed}/{len(rep.trials)} trials matched in {el:.1f}s; nested stages {dict(stages)}")
    print(f"workload: {rep.workload_stats.get('commits')} commits, {rep.workload_stats.get('syncs')} syncs")
    for t in rep.trials:
        if not (t.matched and t.sum_ok):
            print("FAILED", t)
    return 0 if rep.all_passed else 1


if __name__ == "__main__":
    raise SystemExit(main())
