"""Run the architecture x trainer benchmark and print it beside the published table.

    python scripts/reproduce_table.py --config configs/quick.txt --out results/quick
"""

import argparse
import sys
from pathlib import Path

from pbornn.harness import LABELS, PUBLISHED_TABLE, emit_results, format_results, load_config, run_benchmark, ExperimentConfig


def reference_markdown() -> str:
    lines = ["| | SGD | ES | NPSO |", "|---|---|---|---|"]
    for arch in ("lstm", "plstm", "fru"):
        lines.append(f"| {LABELS[arch]} | " + " | ".join(f"{PUBLISHED_TABLE[arch, t]:.3f}" for t in ("sgd", "es", "npso")) + " |")
    return "\n".join(lines) + "\n"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="results/table")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg.seed, cfg.workers = args.seed, args.workers
    table = run_benchmark(cfg, progress=lambda c: print(f"  {c.architecture}/{c.trainer}: {c.status} "
                                                         f"test={c.test_mse:.5g} passes={c.forward_passes}",
                                                         file=sys.stderr))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    emit_results(table, out.with_suffix(".json"), "json")
    emit_results(table, out.with_suffix(".md"), "markdown")
    print("this run (normalised test MSE):")
    print(format_results(table, "markdown"))
    print("published, on proprietary FTSE-100 data (reference only):")
    print(reference_markdown())


if __name__ == "__main__":
    main()
