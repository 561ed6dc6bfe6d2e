"""Lag-40 echo task: ES against truncated-BPTT SGD over several seeds, plus the no-echo control.

    python scripts/long_memory_gate.py --seeds 0 1 2 --budget 6000
"""

import argparse
import json
import time

from pbornn.harness import long_memory_acceptance


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--budget", type=int, default=6000)
    ap.add_argument("--lag", type=int, default=40)
    ap.add_argument("--truncation", type=int, default=20)
    ap.add_argument("--control", action="store_true")
    args = ap.parse_args()

    for seed in args.seeds:
        start = time.perf_counter()
        rep = long_memory_acceptance(seed, args.lag, args.truncation, args.budget, control=args.control)
        row = rep.summary()
        row["seed"] = seed
        row["seconds"] = round(time.perf_counter() - start, 1)
        print(json.dumps(row, sort_keys=True), flush=True)


if __name__ == "__main__":
    main()
