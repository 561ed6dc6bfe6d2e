"""ES on the 10-d sphere with raw, mean-baselined and rank-shaped rewards.

The raw update carries no baseline, so its sampling noise grows with the
loss level; this script shows what that does at the default settings.
"""

import argparse

import numpy as np

from pbornn.core import BudgetMeter, CounterRng
from pbornn.optim import EsConfig, train_es


class Sphere:
    def __init__(self):
        self.meter = BudgetMeter(10**9)

    def batch(self, thetas):
        self.meter.charge(len(thetas))
        return np.sum(np.asarray(thetas) ** 2, axis=1)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--iterations", type=int, default=300)
    args = ap.parse_args()
    variants = {"raw": {}, "baseline": {"reward_baseline": True}, "ranks": {"rank_shaping": True}}
    for name, flags in variants.items():
        finals = []
        for seed in range(args.seeds):
            cfg = EsConfig(0.2, 0.1, population=200, max_iterations=args.iterations, **flags)
            with np.errstate(over="ignore", invalid="ignore"):
                theta = train_es(np.full(10, 5.0), cfg, Sphere(), CounterRng(seed)).theta
                finals.append(float(np.sum(theta**2)))
        print(f"{name:9s} final |theta|^2 per seed: " + ", ".join(f"{f:.3g}" for f in finals))


if __name__ == "__main__":
    main()
