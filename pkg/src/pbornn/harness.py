"""Budget-matched benchmark protocol: random search per (architecture, trainer) cell.

Every cell gets the same forward-pass budget. SGD spends it as
``search_iterations * max_epochs`` epoch passes, the population methods as
``search_iterations * population * pbo_iterations`` individual evaluations.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np

from .cells import CellSpec, layout_for
from .core import BudgetMeter, CounterRng, LossSpec, Scorer
from .data import SynthConfig, build_dataset, compute_rv, generate_synthetic, load_csv, read_rv_csv
from .optim import EsConfig, NpsoConfig, SgdConfig, sgd_train, split_mse, train_es, train_npso

__all__ = [
    "Axis",
    "BudgetParityError",
    "CellResult",
    "Choice",
    "ConfigError",
    "ExperimentConfig",
    "PUBLISHED_TABLE",
    "ResultTable",
    "SearchSpace",
    "default_spaces",
    "emit_results",
    "load_dataset",
    "long_memory_acceptance",
    "random_search",
    "read_results",
    "run_benchmark",
    "run_cell",
]

ARCHITECTURES = ("lstm", "plstm", "fru")
TRAINERS = ("sgd", "es", "npso")
LABELS = {"lstm": "LSTM", "plstm": "P-LSTM", "fru": "FRU", "sgd": "SGD", "es": "ES", "npso": "NPSO"}

# reference display only; these come from proprietary data and are never asserted
PUBLISHED_TABLE = {
    ("lstm", "sgd"): 1.000, ("lstm", "es"): 0.189, ("lstm", "npso"): 0.248,
    ("plstm", "sgd"): 11.272, ("plstm", "es"): 0.189, ("plstm", "npso"): 0.138,
    ("fru", "sgd"): 5.446, ("fru", "es"): 0.188, ("fru", "npso"): 268.441,
}


class ConfigError(ValueError):
    pass


class BudgetParityError(RuntimeError):
    pass


# -- search spaces -------------------------------------------------------------

@dataclass(frozen=True)
class Axis:
    low: float
    high: float
    scale: str = "linear"

    def __post_init__(self):
        if self.low > self.high:
            raise ConfigError(f"axis low {self.low} exceeds high {self.high}")
        if self.scale not in ("linear", "log"):
            raise ConfigError(f"unknown axis scale {self.scale!r}")
        if self.scale == "log" and self.low <= 0:
            raise ConfigError("log-scaled axes need a positive lower bound")

    def sample(self, gen: np.random.Generator) -> float:
        if self.scale == "log":
            return float(math.exp(gen.uniform(math.log(self.low), math.log(self.high))))
        return float(gen.uniform(self.low, self.high))


@dataclass(frozen=True)
class Choice:
    values: tuple

    def __post_init__(self):
        if not self.values:
            raise ConfigError("discrete choice needs at least one value")

    def sample(self, gen: np.random.Generator):
        return self.values[int(gen.integers(len(self.values)))]


@dataclass(frozen=True)
class SearchSpace:
    axes: dict

    def sample(self, gen: np.random.Generator) -> dict:
        # fixed key order keeps draws reproducible
        return {name: self.axes[name].sample(gen) for name in sorted(self.axes)}


def default_spaces(hidden_dims=(5, 10, 20, 40)) -> dict[str, SearchSpace]:
    hidden = Choice(tuple(hidden_dims))
    return {
        "es": SearchSpace({"learning_rate": Axis(1e-3, 1.0, "log"), "noise_std": Axis(1e-3, 1.0, "log"), "hidden_dim": hidden}),
        "npso": SearchSpace({"inertial_weight": Axis(0.4, 0.99), "init_std": Axis(0.01, 1.0, "log"), "hidden_dim": hidden}),
        "sgd": SearchSpace({"learning_rate": Axis(1e-4, 1e-2, "log"), "minibatch_size": Choice((1, 4, 16)), "hidden_dim": hidden}),
    }


@dataclass
class Trial:
    index: int
    params: dict
    val_mse: float
    theta: np.ndarray | None
    passes: int
    status: str = "ok"


@dataclass
class SearchResult:
    best: Trial | None
    trials: list[Trial]

    @property
    def passes(self) -> int:
        return sum(t.passes for t in self.trials)


def random_search(space: SearchSpace, iterations: int, train_trial: Callable, rng: CounterRng, workers: int = 1) -> SearchResult:
    """Sample ``iterations`` configurations i.i.d. and keep the lowest validation MSE.

    ``train_trial(index, params, trial_rng)`` returns a :class:`Trial`. Ties go
    to the earlier trial; trials with non-finite validation loss never win.
    """
    if iterations < 1:
        raise ConfigError("search needs at least one iteration")
    params = [space.sample(rng.child(j).generator("search")) for j in range(iterations)]
    jobs = [(j, params[j], rng.child(j)) for j in range(iterations)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trials = list(pool.map(_call_trial, [train_trial] * iterations, jobs))
    else:
        trials = [_call_trial(train_trial, job) for job in jobs]
    best = None
    for trial in trials:
        if math.isfinite(trial.val_mse) and (best is None or trial.val_mse < best.val_mse):
            best = trial
    return SearchResult(best, trials)


def _call_trial(fn, job):
    return fn(*job)


# -- experiment configuration --------------------------------------------------

@dataclass
class ExperimentConfig:
    csv_path: str | None = None
    csv_kind: str = "returns"
    synth: SynthConfig = field(default_factory=SynthConfig)
    architectures: tuple[str, ...] = ARCHITECTURES
    trainers: tuple[str, ...] = TRAINERS
    budget: int = 30_000
    search_iterations: dict = field(default_factory=lambda: {"sgd": 100, "es": 20, "npso": 20})
    population: int = 30
    pbo_iterations: int = 50
    max_epochs: int = 300
    truncation_length: int = 20
    patience: int = 20
    hidden_dims: tuple[int, ...] = (5, 10, 20, 40)
    lags: int = 1
    transform: str = "standardized-log"
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    calendar: bool = True
    bars_per_day: int = 13
    bar_minutes: int = 30
    fru_frequencies: tuple[float, ...] = (0.0, 1.0, 2.0, 4.0, 8.0)
    fru_horizon: float = 100.0
    plstm_period: float = 13.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        for a in self.architectures:
            if a not in ARCHITECTURES:
                raise ConfigError(f"unknown architecture {a!r}")
        for t in self.trainers:
            if t not in TRAINERS:
                raise ConfigError(f"unknown trainer {t!r}")
            if t not in self.search_iterations:
                raise ConfigError(f"no search_iterations entry for {t!r}")
        if self.csv_kind not in ("returns", "rv"):
            raise ConfigError("csv_kind must be 'returns' or 'rv'")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def planned_passes(self, trainer: str) -> int:
        n = self.search_iterations[trainer]
        if trainer == "sgd":
            return n * self.max_epochs
        return n * self.population * self.pbo_iterations

    def check_parity(self) -> None:
        for t in self.trainers:
            planned = self.planned_passes(t)
            if planned != self.budget:
                raise BudgetParityError(f"{t} plans {planned} passes per cell but the budget is {self.budget}")

    def spaces(self) -> dict[str, SearchSpace]:
        return default_spaces(self.hidden_dims)

    def cell_spec(self, arch: str, input_dim: int, hidden_dim: int) -> CellSpec:
        return CellSpec(
            arch,
            input_dim,
            int(hidden_dim),
            fru_frequencies=self.fru_frequencies if arch == "fru" else (),
            fru_horizon=self.fru_horizon,
            plstm_period=self.plstm_period,
        )


def _coerce(text: str, like, key: str):
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(like, tuple):
        items = [s for s in (p.strip() for p in text.split(",")) if s]
        proto = like[0] if like else ""
        return tuple(_coerce(s, proto, key) for s in items)
    try:
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc
    if like is None and text.lower() in ("none", ""):
        return None
    return text


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply ``key = value`` lines onto ``base`` (defaults if omitted).

    Nested fields use dotted keys (``synth.gamma``, ``search_iterations.es``);
    lists are comma separated; ``#`` starts a comment.
    """
    cfg = base or ExperimentConfig()
    top, synth, search = {}, {}, dict(cfg.search_iterations)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("synth."):
            name = key[6:]
            if name not in {f.name for f in dataclasses.fields(SynthConfig)}:
                raise ConfigError(f"config line {lineno}: unknown key {key!r}")
            synth[name] = _coerce(value, getattr(cfg.synth, name), key)
        elif key.startswith("search_iterations."):
            search[key.split(".", 1)[1]] = _coerce(value, 0, key)
        elif key in {f.name for f in dataclasses.fields(ExperimentConfig)} and key not in ("synth", "search_iterations"):
            top[key] = _coerce(value, getattr(cfg, key), key)
        else:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
    return dataclasses.replace(cfg, synth=dataclasses.replace(cfg.synth, **synth), search_iterations=search, **top)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def load_dataset(cfg: ExperimentConfig):
    if cfg.csv_path is None:
        rv = generate_synthetic(cfg.synth)
    elif cfg.csv_kind == "rv":
        rv = read_rv_csv(cfg.csv_path)
    else:
        rv = compute_rv(load_csv(cfg.csv_path), cfg.bar_minutes)
    return build_dataset(rv, cfg.lags, cfg.transform, cfg.split_fractions, cfg.calendar, cfg.bars_per_day,
                         bar_minutes=cfg.bar_minutes)


# -- training one trial ----------------------------------------------------------

def train_trial(cfg: ExperimentConfig, dataset, arch: str, trainer: str, share: int, index: int, params: dict, rng: CounterRng) -> Trial:
    """Train one configuration under its budget share and score it on validation."""
    spec = cfg.cell_spec(arch, dataset.input_dim, params["hidden_dim"])
    layout = layout_for(spec)
    meter = BudgetMeter(share)
    loss = LossSpec(target_transform=cfg.transform)
    if trainer == "sgd":
        sgd = SgdConfig(
            learning_rate=params["learning_rate"],
            max_epochs=cfg.max_epochs,
            truncation_length=cfg.truncation_length,
            minibatch_size=int(params["minibatch_size"]),
            patience=cfg.patience,
        )
        result = sgd_train(sgd, dataset, spec, layout, meter, rng)
        theta, val = result.theta, result.best_val
    else:
        scorer = Scorer.for_training(dataset, spec, layout, meter, loss)
        if trainer == "es":
            es = EsConfig(params["learning_rate"], params["noise_std"], cfg.population, cfg.pbo_iterations)
            theta = train_es(np.zeros(layout.size), es, scorer, rng).theta
        else:
            npso = NpsoConfig(params["inertial_weight"], params["init_std"], population=cfg.population,
                              max_iterations=cfg.pbo_iterations)
            theta = train_npso(npso, layout.size, scorer, rng)[0].theta
        val = split_mse(spec, layout, theta, dataset, "val")
    status = "ok" if math.isfinite(val) else "diverged"
    return Trial(index, params, val, theta, meter.used, status)


# -- results -------------------------------------------------------------------

@dataclass
class CellResult:
    architecture: str
    trainer: str
    status: str
    test_mse: float = math.nan
    normalised_mse: float = math.nan
    val_mse: float = math.nan
    forward_passes: int = 0
    budget: int = 0
    hyperparameters: dict = field(default_factory=dict)
    wall_time: float = math.nan


@dataclass
class ResultTable:
    cells: list[CellResult] = field(default_factory=list)

    def get(self, arch: str, trainer: str) -> CellResult | None:
        for c in self.cells:
            if c.architecture == arch and c.trainer == trainer:
                return c
        return None

    def normalise(self) -> None:
        """Divide every test MSE by the LSTM+SGD cell's, which becomes exactly 1."""
        ref = self.get("lstm", "sgd")
        denom = ref.test_mse if ref is not None and ref.status == "ok" else math.nan
        for c in self.cells:
            if c is ref and math.isfinite(denom) and denom > 0:
                c.normalised_mse = 1.0
            elif math.isfinite(denom) and denom > 0 and c.status in ("ok", "diverged"):
                c.normalised_mse = c.test_mse / denom
            else:
                c.normalised_mse = math.nan


def run_cell(cfg: ExperimentConfig, dataset, arch: str, trainer: str, workers: int = 1) -> CellResult:
    """Random search for one (architecture, trainer) cell, then one test evaluation."""
    start = time.perf_counter()
    cell = CellResult(arch, trainer, "ok", budget=cfg.budget)
    if trainer == "sgd" and arch != "lstm":
        cell.status = "not implemented"
        return cell
    iterations = cfg.search_iterations[trainer]
    share = cfg.budget // iterations
    cell_id = ARCHITECTURES.index(arch) * len(TRAINERS) + TRAINERS.index(trainer)
    rng = CounterRng(cfg.seed).child(cell_id)
    fn = partial(train_trial, cfg, dataset, arch, trainer, share)
    search = random_search(cfg.spaces()[trainer], iterations, fn, rng, workers)
    cell.forward_passes = search.passes
    if cell.forward_passes > cfg.budget:
        raise BudgetParityError(f"{arch}/{trainer} used {cell.forward_passes} passes, budget {cfg.budget}")
    if search.best is None:
        cell.status = "failed"
    else:
        best = search.best
        cell.hyperparameters = dict(best.params)
        cell.val_mse = best.val_mse
        spec = cfg.cell_spec(arch, dataset.input_dim, best.params["hidden_dim"])
        cell.test_mse = split_mse(spec, layout_for(spec), best.theta, dataset, "test")
        if not math.isfinite(cell.test_mse):
            cell.status = "diverged"
    cell.wall_time = time.perf_counter() - start
    return cell


def run_benchmark(cfg: ExperimentConfig, dataset=None, progress: Callable | None = None) -> ResultTable:
    """Fill every requested cell under budget parity and normalise by LSTM+SGD."""
    cfg.check_parity()
    dataset = load_dataset(cfg) if dataset is None else dataset
    table = ResultTable()
    for arch in ARCHITECTURES:
        if arch not in cfg.architectures:
            continue
        for trainer in TRAINERS:
            if trainer not in cfg.trainers:
                continue
            cell = run_cell(cfg, dataset, arch, trainer, cfg.workers)
            table.cells.append(cell)
            if progress is not None:
                progress(cell)
    table.normalise()
    return table


# -- long-memory gate ------------------------------------------------------------

@dataclass
class GateReport:
    sgd_mse: float
    es_mse: float
    mean_baseline_mse: float
    control: bool
    sgd: CellResult
    es: CellResult

    @property
    def passed(self) -> bool | None:
        """None for the control run, which has no long-memory term to find."""
        if self.control:
            return None
        return self.es_mse <= 0.5 * self.sgd_mse and self.sgd_mse >= 0.9 * self.mean_baseline_mse

    def summary(self) -> dict:
        return {
            "sgd_mse": _enc_float(self.sgd_mse),
            "es_mse": _enc_float(self.es_mse),
            "mean_baseline_mse": _enc_float(self.mean_baseline_mse),
            "control": self.control,
            "passed": self.passed,
            "sgd_hyperparameters": _row(self.sgd, False)["hyperparameters"],
            "es_hyperparameters": _row(self.es, False)["hyperparameters"],
        }


def gate_config(seed: int = 0, lag: int = 40, truncation: int = 20, budget: int = 6000, length: int = 1500,
                gamma: float = 0.9) -> ExperimentConfig:
    """Echo task: h_t depends only on h_{t-lag} and fresh noise.

    ``gamma = 0`` turns the echo off, leaving white noise (the control).
    """
    if lag <= truncation:
        raise ConfigError(f"lag {lag} must exceed the truncation window {truncation}")
    synth = SynthConfig(length=length, lag=lag, phi=0.0, gamma=gamma, season=0.0, noise_std=0.5, seed=seed,
                        min_r2_gain=0.0)
    return ExperimentConfig(
        synth=synth,
        architectures=("lstm",),
        trainers=("sgd", "es"),
        budget=budget,
        search_iterations={"sgd": max(1, budget // 300), "es": max(1, budget // (30 * 50))},
        truncation_length=truncation,
        calendar=False,
        seed=seed,
    )


def mean_baseline_mse(cfg: ExperimentConfig, dataset) -> float:
    """Expected squared error of forecasting the stationary mean, in target units.

    With no one-step persistence and no season the generator's stationary
    variance is noise_std^2 / (1 - gamma^2); standardising divides it by the
    training spread.
    """
    s = cfg.synth
    if s.phi != 0 or s.season != 0 or cfg.transform != "standardized-log":
        raise ConfigError("closed-form baseline needs phi = 0, no season and standardized-log targets")
    return s.noise_std**2 / (1.0 - s.gamma**2) / dataset.stats[1] ** 2


def run_gate(cfg: ExperimentConfig, dataset=None) -> GateReport:
    cfg.check_parity()
    dataset = load_dataset(cfg) if dataset is None else dataset
    sgd = run_cell(cfg, dataset, "lstm", "sgd", cfg.workers)
    es = run_cell(cfg, dataset, "lstm", "es", cfg.workers)
    return GateReport(sgd.test_mse, es.test_mse, mean_baseline_mse(cfg, dataset), cfg.synth.gamma == 0, sgd, es)


def long_memory_acceptance(seed: int = 0, D: int = 40, truncation: int = 20, budget: int = 6000,
                           control: bool = False, workers: int = 1) -> GateReport:
    """SGD (truncated BPTT) against ES on the lag-D echo task under one budget."""
    cfg = gate_config(seed, D, truncation, budget, gamma=0.0 if control else 0.9)
    cfg.workers = workers
    return run_gate(cfg)


# -- serialisation -------------------------------------------------------------

FIELDS = ("architecture", "trainer", "status", "test_mse", "normalised_mse", "val_mse", "forward_passes", "budget", "hyperparameters")
FLOAT_FIELDS = ("test_mse", "normalised_mse", "val_mse", "wall_time")


def _enc_float(x: float):
    x = float(x)
    return x if math.isfinite(x) else repr(x)


def _dec_float(x) -> float:
    return float(x)


def _row(cell: CellResult, timings: bool) -> dict:
    row = {name: getattr(cell, name) for name in FIELDS}
    if timings:
        row["wall_time"] = cell.wall_time
    for name in FLOAT_FIELDS:
        if name in row:
            row[name] = _enc_float(row[name])
    row["hyperparameters"] = {k: _enc_float(v) if isinstance(v, float) else v for k, v in sorted(cell.hyperparameters.items())}
    return row


def _from_row(row: dict) -> CellResult:
    kwargs = dict(row)
    for name in FLOAT_FIELDS:
        if name in kwargs:
            kwargs[name] = _dec_float(kwargs[name])
    kwargs["forward_passes"] = int(kwargs["forward_passes"])
    kwargs["budget"] = int(kwargs["budget"])
    return CellResult(**kwargs)


def _markdown(table: ResultTable) -> str:
    trainers = [t for t in TRAINERS if any(c.trainer == t for c in table.cells)] or list(TRAINERS)
    archs = [a for a in ARCHITECTURES if any(c.architecture == a for c in table.cells)]
    lines = ["| | " + " | ".join(LABELS[t] for t in trainers) + " |", "|---|" + "---|" * len(trainers)]
    notes = []
    for arch in archs:
        row = []
        for t in trainers:
            c = table.get(arch, t)
            if c is None:
                row.append("")
            elif c.status == "diverged":
                notes.append(f"[^{len(notes) + 1}]: {LABELS[arch]} / {LABELS[t]} diverged; raw test MSE {c.test_mse!r}.")
                row.append(f"div.[^{len(notes)}]")
            elif c.status != "ok":
                row.append("n/a" if c.status == "not implemented" else c.status)
            elif math.isfinite(c.normalised_mse):
                row.append(f"{c.normalised_mse:.3f}")
            else:
                row.append(f"{c.test_mse:.6g} (raw)")
        lines.append(f"| {LABELS[arch]} | " + " | ".join(row) + " |")
    if notes:
        lines.append("")
        lines.extend(notes)
    return "\n".join(lines) + "\n"


def format_results(table: ResultTable, fmt: str, timings: bool = False) -> str:
    if fmt == "json":
        return json.dumps({"cells": [_row(c, timings) for c in table.cells]}, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        names = list(FIELDS) + (["wall_time"] if timings else [])
        writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for c in table.cells:
            row = _row(c, timings)
            row["hyperparameters"] = json.dumps(row["hyperparameters"], sort_keys=True)
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()
    if fmt == "markdown":
        return _markdown(table)
    raise ConfigError(f"unknown format {fmt!r}")


def emit_results(table: ResultTable, path, fmt: str = "json", timings: bool = False) -> Path:
    """Write ``table`` deterministically; wall times only with ``timings=True``."""
    path = Path(path)
    path.write_text(format_results(table, fmt, timings), encoding="utf-8")
    return path


def read_results(path, fmt: str | None = None) -> ResultTable:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    text = path.read_text(encoding="utf-8")
    if fmt == "json":
        return ResultTable([_from_row(r) for r in json.loads(text)["cells"]])
    if fmt == "csv":
        rows = []
        for r in csv.DictReader(io.StringIO(text)):
            r["hyperparameters"] = json.loads(r["hyperparameters"])
            rows.append(_from_row(r))
        return ResultTable(rows)
    raise ConfigError(f"cannot read results in format {fmt!r}")
