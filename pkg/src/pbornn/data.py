"""Realized-variance data: CSV ingestion, bar aggregation, datasets, synthetic series."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "ReturnSeries",
    "RvSeries",
    "SequenceDataset",
    "SynthConfig",
    "build_dataset",
    "compute_rv",
    "generate_synthetic",
    "lag_r2_gain",
    "load_csv",
    "read_rv_csv",
    "write_returns_csv",
    "write_rv_csv",
]

MINUTE = np.timedelta64(1, "m")


class DataError(ValueError):
    pass


def _as_minutes(timestamps) -> np.ndarray:
    return np.asarray(timestamps, dtype="datetime64[m]")


@dataclass
class ReturnSeries:
    timestamps: np.ndarray
    returns: np.ndarray

    def __post_init__(self):
        self.timestamps = _as_minutes(self.timestamps)
        self.returns = np.asarray(self.returns, dtype=float)
        if self.timestamps.shape != self.returns.shape:
            raise DataError("timestamps and returns must have equal length")

    def __len__(self):
        return len(self.returns)


@dataclass
class RvSeries:
    bar_timestamps: np.ndarray
    rv: np.ndarray

    def __post_init__(self):
        self.bar_timestamps = _as_minutes(self.bar_timestamps)
        self.rv = np.asarray(self.rv, dtype=float)
        if self.bar_timestamps.shape != self.rv.shape:
            raise DataError("bar_timestamps and rv must have equal length")

    def __len__(self):
        return len(self.rv)


def _compensated_bar_sums(values: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Kahan-summed segments, stepping through every bar at once."""
    lengths = np.diff(np.r_[starts, len(values)])
    total = np.zeros(len(starts))
    carry = np.zeros(len(starts))
    for j in range(int(lengths.max())):
        live = lengths > j
        x = values[starts[live] + j]
        y = x - carry[live]
        t = total[live] + y
        carry[live] = (t - total[live]) - y
        total[live] = t
    return total


def compute_rv(returns: ReturnSeries, bar_minutes: int = 30) -> RvSeries:
    """Sum of squared one-minute returns per clock-aligned bar.

    A return stamped at minute ``m`` belongs to the bar starting at
    ``floor(m / bar_minutes) * bar_minutes``; bars are labelled by their
    start. Bars without returns are omitted.
    """
    if bar_minutes < 1:
        raise DataError("bar_minutes must be >= 1")
    if len(returns) == 0:
        raise DataError("empty return series")
    minutes = returns.timestamps.astype(np.int64)
    if np.any(np.diff(minutes) <= 0):
        raise DataError("timestamps must be strictly increasing")
    bars = (minutes // bar_minutes) * bar_minutes
    starts = np.flatnonzero(np.r_[True, bars[1:] != bars[:-1]])
    rv = _compensated_bar_sums(returns.returns**2, starts)
    return RvSeries(bars[starts].astype("datetime64[m]"), rv)


# -- CSV I/O -----------------------------------------------------------------

def _parse_timestamp(text: str, lineno: int) -> np.datetime64:
    try:
        return np.datetime64(datetime.fromisoformat(text.strip()).replace(tzinfo=None), "m")
    except ValueError as exc:
        raise DataError(f"line {lineno}: bad timestamp {text!r}") from exc


def load_csv(path, timestamp_column: str = "timestamp", value_column: str | None = None) -> ReturnSeries:
    """Read ``timestamp`` plus either ``price`` or ``return`` columns.

    Prices are converted to log returns (the first row only anchors the
    first return). Rows are sorted by time on output.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if timestamp_column not in fields:
            raise DataError(f"line 1: missing {timestamp_column!r} column")
        if value_column is None:
            value_column = "price" if "price" in fields else "return" if "return" in fields else None
        if value_column not in fields:
            raise DataError("line 1: need a 'price' or 'return' column")
        stamps, values = [], []
        for row in reader:
            lineno = reader.line_num
            stamps.append(_parse_timestamp(row[timestamp_column] or "", lineno))
            try:
                value = float(row[value_column])
            except (TypeError, ValueError) as exc:
                raise DataError(f"line {lineno}: bad {value_column} {row[value_column]!r}") from exc
            if value_column == "price" and not value > 0:
                raise DataError(f"line {lineno}: non-positive price {value}")
            values.append(value)
    if not stamps:
        raise DataError(f"{path}: no data rows")
    ts = np.array(stamps, dtype="datetime64[m]")
    vals = np.array(values)
    order = np.argsort(ts, kind="stable")
    ts, vals = ts[order], vals[order]
    if value_column == "price":
        if len(vals) < 2:
            raise DataError(f"{path}: need at least two prices")
        return ReturnSeries(ts[1:], np.diff(np.log(vals)))
    return ReturnSeries(ts, vals)


def _fmt_ts(ts: np.datetime64) -> str:
    return str(ts.astype("datetime64[m]"))


def write_returns_csv(series: ReturnSeries, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write("timestamp,return\n")
        for ts, r in zip(series.timestamps, series.returns):
            fh.write(f"{_fmt_ts(ts)},{r:.17g}\n")


def write_rv_csv(series: RvSeries, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write("bar_ts,rv\n")
        for ts, v in zip(series.bar_timestamps, series.rv):
            fh.write(f"{_fmt_ts(ts)},{v:.17g}\n")


def read_rv_csv(path) -> RvSeries:
    stamps, values = [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"bar_ts", "rv"} <= set(reader.fieldnames):
            raise DataError("line 1: expected header 'bar_ts,rv'")
        for row in reader:
            stamps.append(_parse_timestamp(row["bar_ts"], reader.line_num))
            try:
                values.append(float(row["rv"]))
            except ValueError as exc:
                raise DataError(f"line {reader.line_num}: bad rv {row['rv']!r}") from exc
    if not stamps:
        raise DataError(f"{path}: no data rows")
    return RvSeries(np.array(stamps, dtype="datetime64[m]"), np.array(values))


# -- datasets ------------------------------------------------------------------

@dataclass
class SequenceDataset:
    """Features, one-step-ahead targets and chronological split sizes.

    Row ``t`` holds the transformed RV lags ending at bar ``t + lags - 1``
    and the target is the transformed RV of the following bar.
    """

    features: np.ndarray
    targets: np.ndarray
    n_train: int
    n_val: int
    n_test: int
    transform: str = "standardized-log"
    stats: tuple[float, float] = (0.0, 1.0)
    times: np.ndarray | None = None
    feature_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.n_train + self.n_val + self.n_test != len(self.targets):
            raise DataError("split sizes must cover every row")
        if self.times is None:
            self.times = np.arange(len(self.targets), dtype=float)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def bounds(self, split: str) -> tuple[int, int]:
        a, b = self.n_train, self.n_train + self.n_val
        return {"train": (0, a), "val": (a, b), "test": (b, len(self.targets))}[split]

    def segment(self, split: str):
        lo, hi = self.bounds(split)
        return self.features[lo:hi], self.targets[lo:hi], self.times[lo:hi]

    def context(self, split: str):
        """Inputs from the series start through the split end, plus the scoring offset."""
        lo, hi = self.bounds(split)
        return self.features[:hi], self.targets[lo:hi], self.times[:hi], lo


def _bar_of_day(stamps: np.ndarray) -> np.ndarray:
    days = stamps.astype("datetime64[D]")
    ordinal = np.zeros(len(stamps))
    for i in range(1, len(stamps)):
        ordinal[i] = ordinal[i - 1] + 1 if days[i] == days[i - 1] else 0
    return ordinal


def build_dataset(
    rv: RvSeries,
    lags: int = 1,
    transform: str = "standardized-log",
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    calendar: bool = True,
    bars_per_day: int = 13,
    use_timestamps: bool = False,
    bar_minutes: int = 30,
) -> SequenceDataset:
    """Turn an RV series into a lagged one-step-ahead forecasting dataset.

    Transform statistics come only from the RV values that appear as the
    most recent lag in training rows, so validation and test values never
    touch them.
    """
    if lags < 1:
        raise DataError("lags must be >= 1")
    fr = np.asarray(split_fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr <= 0) or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise DataError("split fractions must be three positive numbers summing to 1")
    values = rv.rv
    T = len(values)
    if T <= lags + 1:
        raise DataError(f"series of length {T} is too short for {lags} lags")
    n = T - lags
    n_train = int(round(fr[0] * n))
    n_val = int(round(fr[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DataError("every split needs at least one row")

    if transform == "identity":
        z, stats = values.astype(float), (0.0, 1.0)
    elif transform in ("log", "standardized-log"):
        if np.any(values <= 0):
            raise DataError("log transforms need strictly positive rv")
        z = np.log(values)
        stats = (0.0, 1.0)
        if transform == "standardized-log":
            train_part = z[lags - 1 : lags - 1 + n_train]
            stats = (float(train_part.mean()), float(train_part.std()))
            if stats[1] == 0:
                raise DataError("training split has zero variance")
            z = (z - stats[0]) / stats[1]
    else:
        raise DataError(f"unknown transform {transform!r}")

    cols = [z[lags - 1 - j : T - 1 - j] for j in range(lags)]
    names = [f"lag{j}" for j in range(lags)]
    if calendar:
        cols.append(_bar_of_day(rv.bar_timestamps)[lags - 1 : T - 1] / bars_per_day)
        names.append("bar_of_day")
    features = np.column_stack(cols)
    targets = z[lags:].copy()
    times = None
    if use_timestamps:
        minutes = rv.bar_timestamps.astype(np.int64)[lags - 1 : T - 1]
        times = (minutes - minutes[0]) / float(bar_minutes)
    return SequenceDataset(features, targets, n_train, n_val, n_test, transform, stats, times, tuple(names))


# -- synthetic long-memory series ----------------------------------------------

@dataclass
class SynthConfig:
    """Log-variance process with one-bar persistence, a lag-D echo and intraday seasonality.

    h_t = c + phi*h_{t-1} + gamma*h_{t-D} + s*cos(2*pi*(t mod P)/P) + noise_std*e_t
    """

    length: int = 20_000
    period: int = 13
    lag: int = 40
    intercept: float = -9.0
    phi: float = 0.1
    gamma: float = 0.85
    season: float = 0.3
    noise_std: float = 0.5
    seed: int = 0
    min_r2_gain: float = 0.05
    bar_minutes: int = 30
    start: str = "2000-01-04T08:00"

    @property
    def stationary_mean(self) -> float:
        return self.intercept / (1.0 - self.phi - self.gamma)


def _simulate_log_variance(cfg: SynthConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    D, burn = cfg.lag, 20 * max(cfg.lag, cfg.period)
    total = n + burn
    noise = cfg.noise_std * rng.standard_normal(total)
    steps = np.arange(total) - burn
    seasonal = cfg.season * np.cos(2.0 * np.pi * np.mod(steps, cfg.period) / cfg.period)
    h = np.full(total + D, cfg.stationary_mean)
    for t in range(total):
        j = t + D
        h[j] = cfg.intercept + cfg.phi * h[j - 1] + cfg.gamma * h[j - D] + seasonal[t] + noise[t]
    return h[D + burn :]


def _check_synth(cfg: SynthConfig) -> None:
    if cfg.phi + cfg.gamma >= 1.0:
        raise DataError(f"nonstationary config: phi + gamma = {cfg.phi + cfg.gamma} >= 1")
    if cfg.length < 10 * max(cfg.period, cfg.lag):
        raise DataError("length must be at least 10 * max(period, lag)")
    if cfg.lag <= 20:
        warnings.warn(f"lag {cfg.lag} does not exceed the default BPTT truncation of 20", stacklevel=3)


def lag_r2_gain(cfg: SynthConfig, n: int = 50_000) -> float:
    """Population R^2 gained by adding h_{t-D} to a regression on h_{t-1} and the season."""
    h = _simulate_log_variance(cfg, n, np.random.default_rng([cfg.seed, 1]))
    D = cfg.lag
    y = h[D:]
    phase = np.mod(np.arange(D, len(h)), cfg.period)
    season = np.eye(cfg.period)[phase]
    short = np.column_stack([season, h[D - 1 : -1]])
    full = np.column_stack([short, h[:-D]])

    def r2(X):
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        return 1.0 - np.var(y - X @ beta) / np.var(y)

    return float(r2(full) - r2(short))


def generate_synthetic(cfg: SynthConfig, log_variance: bool = False):
    """Simulate an RV series on a regular 30-minute bar grid.

    Days hold ``cfg.period`` consecutive bars; with ``log_variance=True`` the
    latent path h is returned alongside the series.
    """
    _check_synth(cfg)
    if cfg.min_r2_gain > 0 and cfg.gamma != 0:
        gain = lag_r2_gain(cfg)
        if gain < cfg.min_r2_gain:
            warnings.warn(f"lag-{cfg.lag} R^2 gain {gain:.4f} is below the floor {cfg.min_r2_gain}", stacklevel=2)
    h = _simulate_log_variance(cfg, cfg.length, np.random.default_rng(cfg.seed))
    idx = np.arange(cfg.length)
    day, bar = np.divmod(idx, cfg.period)
    start = np.datetime64(cfg.start, "m")
    stamps = start.astype("datetime64[D]") + day.astype("timedelta64[D]")
    stamps = stamps.astype("datetime64[m]") + (start - start.astype("datetime64[D]")) + bar * cfg.bar_minutes * MINUTE
    series = RvSeries(stamps, np.exp(h))
    return (series, h) if log_variance else series
