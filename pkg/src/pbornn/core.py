"""Shared plumbing: counter-based random streams, budget accounting, losses.

The budget unit is one full feed-forward pass of one parameter vector over
the training split. Every loss evaluation that a trainer requests goes
through a :class:`BudgetMeter`, so the number of passes used is exact.
"""

from __future__ import annotations

import math
import threading
import zlib
from dataclasses import dataclass

import numpy as np

from .cells import CellSpec, WeightLayout, forward_population

__all__ = [
    "BudgetExhausted",
    "BudgetMeter",
    "CounterRng",
    "LossSpec",
    "RngStream",
    "Scorer",
    "evaluate_loss",
    "gaussian_sample",
    "uniform_sample",
]

TRANSFORMS = ("identity", "log", "standardized-log")


class BudgetExhausted(RuntimeError):
    """Raised before any work is done when a request exceeds the remaining budget."""


@dataclass(frozen=True)
class RngStream:
    """Address of one independent random substream.

    The generator for a stream is derived only from ``master_seed`` and
    ``stream_id``, so draws never depend on evaluation order.
    """

    master_seed: int
    stream_id: tuple[int, ...]

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.master_seed, spawn_key=self.stream_id)
        return np.random.Generator(np.random.Philox(seq))


def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode())


def gaussian_sample(stream: RngStream, dim: int) -> np.ndarray:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return stream.generator().standard_normal(dim)


def uniform_sample(stream: RngStream) -> float:
    return float(stream.generator().random())


class CounterRng:
    """Keyed source of substreams for (individual, iteration, purpose).

    ``namespace`` scopes the streams, e.g. to one benchmark cell and search
    trial, via :meth:`child`.
    """

    def __init__(self, master_seed: int, namespace: tuple[int, ...] = ()):
        self.master_seed = int(master_seed) & 0xFFFFFFFFFFFFFFFF
        self.namespace = tuple(int(n) for n in namespace)

    def __repr__(self):
        return f"CounterRng({self.master_seed}, namespace={self.namespace})"

    def child(self, *ids: int) -> CounterRng:
        return CounterRng(self.master_seed, self.namespace + tuple(int(i) for i in ids))

    def stream(self, i: int, k: int, purpose: str) -> RngStream:
        return RngStream(self.master_seed, self.namespace + (_purpose_code(purpose), int(i), int(k)))

    def normal(self, i: int, k: int, dim: int, purpose: str = "es-noise") -> np.ndarray:
        return gaussian_sample(self.stream(i, k, purpose), dim)

    def uniform(self, i: int, k: int, purpose: str, size: int | None = None):
        if size is None:
            return uniform_sample(self.stream(i, k, purpose))
        return self.stream(i, k, purpose).generator().random(size)

    def generator(self, purpose: str) -> np.random.Generator:
        return self.stream(0, 0, purpose).generator()


class BudgetMeter:
    """Counts full feed-forward passes against a cap."""

    def __init__(self, cap: int):
        if cap < 0:
            raise ValueError("cap must be non-negative")
        self.cap = int(cap)
        self.used = 0
        self._lock = threading.Lock()

    def __repr__(self):
        return f"BudgetMeter(used={self.used}, cap={self.cap})"

    @property
    def remaining(self) -> int:
        return self.cap - self.used

    def charge(self, n: int = 1) -> None:
        with self._lock:
            if self.used + n > self.cap:
                raise BudgetExhausted(f"requested {n} passes with {self.cap - self.used} remaining")
            self.used += n


@dataclass(frozen=True)
class LossSpec:
    kind: str = "mse"
    target_transform: str = "standardized-log"

    def __post_init__(self):
        if self.kind != "mse":
            raise ValueError(f"unsupported loss kind {self.kind!r}")
        if self.target_transform not in TRANSFORMS:
            raise ValueError(f"unknown target transform {self.target_transform!r}")


def mse_per_individual(preds: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """MSE along the time and output axes; non-finite results become +inf."""
    with np.errstate(over="ignore", invalid="ignore"):
        targets = np.asarray(targets, dtype=float).reshape(preds.shape[-2:])
        err = np.mean((preds - targets) ** 2, axis=(-2, -1))
    return np.where(np.isfinite(err), err, np.inf)


class Scorer:
    """Training-loss evaluator bound to one dataset, cell and meter.

    Each parameter vector scored costs exactly one pass. A batch is charged
    up front, so an over-budget request consumes nothing.
    """

    def __init__(self, spec: CellSpec, layout: WeightLayout, features, targets, meter: BudgetMeter,
                 loss: LossSpec | None = None, times=None):
        self.spec = spec
        self.layout = layout
        self.features = np.asarray(features, dtype=float)
        self.targets = np.asarray(targets, dtype=float)
        self.times = None if times is None else np.asarray(times, dtype=float)
        self.meter = meter
        self.loss = loss or LossSpec()
        if self.features.shape[0] == 0:
            raise ValueError("cannot score on an empty dataset")

    @classmethod
    def for_training(cls, dataset, spec, layout, meter, loss=None):
        x, y, times = dataset.segment("train")
        return cls(spec, layout, x, y, meter, loss, times)

    def __call__(self, theta) -> float:
        return float(self.batch(np.asarray(theta, dtype=float)[None, :])[0])

    def batch(self, thetas) -> np.ndarray:
        thetas = np.asarray(thetas, dtype=float)
        self.meter.charge(thetas.shape[0])
        preds, _ = forward_population(self.spec, self.layout, thetas, self.features, self.times)
        return mse_per_individual(preds, self.targets)


def evaluate_loss(data, layout: WeightLayout, theta, loss: LossSpec, meter: BudgetMeter, spec: CellSpec) -> float:
    """Mean loss of ``theta`` over the full training split; charges one pass.

    Divergent weights give ``math.inf`` rather than an exception, which is how
    every trainer ranks them.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (layout.size,):
        raise ValueError(f"theta must have shape ({layout.size},)")
    value = Scorer.for_training(data, spec, layout, meter, loss)(theta)
    return value if math.isfinite(value) else math.inf
