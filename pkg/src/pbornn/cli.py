"""Command-line entry point: ``pbornn <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 budget-parity violation,
4 acceptance-gate failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .core import CounterRng
from .data import DataError, compute_rv, generate_synthetic, load_csv, write_rv_csv
from .harness import (
    ARCHITECTURES,
    TRAINERS,
    BudgetParityError,
    ConfigError,
    ExperimentConfig,
    ResultTable,
    emit_results,
    format_results,
    gate_config,
    load_config,
    load_dataset,
    run_benchmark,
    run_cell,
    run_gate,
    train_trial,
)

EXIT_OK, EXIT_CONFIG, EXIT_PARITY, EXIT_GATE = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value experiment config file")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--workers", type=int, help="parallel search trials")
    p.add_argument("--out", help="output path (stdout when omitted)")
    p.add_argument("--format", choices=("json", "csv", "markdown"), default="json")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pbornn", description="Population-based RNN training benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic RV series as CSV")
    _common(p)

    p = sub.add_parser("rv", help="turn a one-minute price/return CSV into RV bars")
    _common(p)
    p.add_argument("input", help="CSV with a timestamp column and a price or return column")
    p.add_argument("--bar-minutes", type=int, default=30)
    p.add_argument("--timestamp-column", default="timestamp")

    p = sub.add_parser("train", help="train one architecture x trainer with fixed hyperparameters")
    _common(p)
    p.add_argument("--arch", choices=ARCHITECTURES, required=True)
    p.add_argument("--trainer", choices=TRAINERS, required=True)
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                   help="hyperparameter, e.g. learning_rate=0.05 (repeatable)")

    p = sub.add_parser("search", help="random search for one cell")
    _common(p)
    p.add_argument("--arch", choices=ARCHITECTURES, required=True)
    p.add_argument("--trainer", choices=TRAINERS, required=True)

    p = sub.add_parser("benchmark", help="full architecture x trainer table")
    _common(p)
    p.add_argument("--timings", action="store_true", help="include wall times (breaks byte-identity)")

    p = sub.add_parser("accept", help="long-memory gate: ES against truncated-BPTT SGD")
    _common(p)
    p.add_argument("--lag", type=int, default=40)
    p.add_argument("--truncation", type=int, default=20)
    p.add_argument("--budget", type=int, default=6000)
    p.add_argument("--control", action="store_true", help="run without the long-memory term")
    return parser


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.workers is not None:
        changes["workers"] = args.workers
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _write(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _params(pairs: list[str]) -> dict:
    params = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--param expects KEY=VALUE, got {pair!r}")
        try:
            params[key.strip()] = json.loads(value)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--param {key}: cannot parse {value!r}") from exc
    return params


def _cmd_synth(args) -> int:
    cfg = _experiment(args)
    synth = cfg.synth if args.seed is None else dataclasses.replace(cfg.synth, seed=args.seed)
    out = args.out or "synthetic_rv.csv"
    write_rv_csv(generate_synthetic(synth), out)
    print(f"wrote {synth.length} bars to {out}", file=sys.stderr)
    return EXIT_OK


def _cmd_rv(args) -> int:
    rv = compute_rv(load_csv(args.input, args.timestamp_column), args.bar_minutes)
    out = args.out or "rv.csv"
    write_rv_csv(rv, out)
    print(f"wrote {len(rv)} bars to {out}", file=sys.stderr)
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _experiment(args)
    if args.trainer == "sgd" and args.arch != "lstm":
        raise ConfigError("the SGD baseline only supports the LSTM")
    params = cfg.spaces()[args.trainer].sample(CounterRng(cfg.seed).generator("train-defaults"))
    params.update(_params(args.param))
    share = cfg.budget // cfg.search_iterations[args.trainer]
    dataset = load_dataset(cfg)
    trial = train_trial(cfg, dataset, args.arch, args.trainer, share, 0, params, CounterRng(cfg.seed))
    from .cells import layout_for
    from .optim import split_mse

    spec = cfg.cell_spec(args.arch, dataset.input_dim, params["hidden_dim"])
    test = split_mse(spec, layout_for(spec), trial.theta, dataset, "test")
    report = {"architecture": args.arch, "trainer": args.trainer, "hyperparameters": params,
              "val_mse": repr(trial.val_mse), "test_mse": repr(test), "forward_passes": trial.passes,
              "status": trial.status}
    _write(json.dumps(report, indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def _cmd_search(args) -> int:
    cfg = _experiment(args)
    cfg.check_parity()
    cell = run_cell(cfg, load_dataset(cfg), args.arch, args.trainer, cfg.workers)
    table = ResultTable([cell])
    table.normalise()
    _emit(table, args)
    return EXIT_OK


def _emit(table: ResultTable, args, timings: bool = False) -> None:
    if args.out is None:
        sys.stdout.write(format_results(table, args.format, timings))
    else:
        emit_results(table, args.out, args.format, timings)


def _cmd_benchmark(args) -> int:
    cfg = _experiment(args)

    def progress(cell):
        print(f"{cell.architecture}/{cell.trainer}: {cell.status} test={cell.test_mse:.6g} "
              f"passes={cell.forward_passes}", file=sys.stderr)

    table = run_benchmark(cfg, progress=progress)
    _emit(table, args, args.timings)
    return EXIT_OK


def _cmd_accept(args) -> int:
    base = _experiment(args)
    cfg = gate_config(base.seed, args.lag, args.truncation, args.budget, gamma=0.0 if args.control else 0.9)
    cfg.workers = base.workers
    report = run_gate(cfg)
    _write(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n", args.out)
    verdict = {None: "CONTROL", True: "PASS", False: "FAIL"}[report.passed]
    print(f"long-memory gate: {verdict} (es {report.es_mse:.4g}, sgd {report.sgd_mse:.4g}, "
          f"mean baseline {report.mean_baseline_mse:.4g})", file=sys.stderr)
    return EXIT_GATE if report.passed is False else EXIT_OK


COMMANDS = {
    "synth": _cmd_synth,
    "rv": _cmd_rv,
    "train": _cmd_train,
    "search": _cmd_search,
    "benchmark": _cmd_benchmark,
    "accept": _cmd_accept,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except BudgetParityError as exc:
        print(f"budget parity violation: {exc}", file=sys.stderr)
        return EXIT_PARITY
    except (ConfigError, DataError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
