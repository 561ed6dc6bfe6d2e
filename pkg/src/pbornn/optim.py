"""Evolution Strategies, Neuroparticle Swarm Optimisation and the SGD baseline.

The two population methods act on flat parameter vectors through a scorer,
any object with ``batch(thetas) -> losses`` that charges one pass per row.
Random draws come from an rng object exposing ``normal(i, k, dim, purpose)``
and ``uniform(i, k, purpose, size=None)`` (see :class:`pbornn.core.CounterRng`),
which keeps every draw addressable by individual and iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cells import DivergenceError, forward_population, init_weights, lstm_bptt_gradient, zero_state
from .core import BudgetExhausted, mse_per_individual

__all__ = [
    "EsConfig",
    "NpsoConfig",
    "Particle",
    "SgdConfig",
    "SwarmState",
    "es_step",
    "initialize_population",
    "init_swarm",
    "npso_step",
    "sgd_train",
    "train_es",
    "train_npso",
]


@dataclass(frozen=True)
class EsConfig:
    learning_rate: float = 0.1
    noise_std: float = 0.1
    population: int = 30
    max_iterations: int = 50
    rank_shaping: bool = False
    # subtract the population mean reward; off keeps the raw update
    reward_baseline: bool = False

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.noise_std > 0):
            raise ValueError("learning_rate and noise_std must be positive")
        if self.population < 1 or self.max_iterations < 1:
            raise ValueError("population and max_iterations must be >= 1")


@dataclass(frozen=True)
class NpsoConfig:
    inertial_weight: float = 0.7
    init_std: float = 0.1
    cognitive: float = 2.0
    social: float = 2.0
    population: int = 30
    max_iterations: int = 50
    per_coordinate: bool = False

    def __post_init__(self):
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")
        if self.population < 1 or self.max_iterations < 1:
            raise ValueError("population and max_iterations must be >= 1")

    @property
    def standard_constants(self) -> bool:
        """False when c1/c2 were overridden away from the fixed value 2."""
        return self.cognitive == 2.0 and self.social == 2.0 and not self.per_coordinate


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_epochs: int = 300
    truncation_length: int = 20
    minibatch_size: int = 1
    patience: int = 20
    trainable: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.truncation_length < 1 or self.minibatch_size < 1:
            raise ValueError("truncation_length and minibatch_size must be >= 1")
        if not 1 <= self.max_epochs <= 300:
            raise ValueError("max_epochs must lie in [1, 300]")


# -- initialisation ------------------------------------------------------------

def initialize_population(method: str, n: int, dim: int, rng, std: float = 1.0) -> np.ndarray:
    """``zero`` or ``gaussian`` population of shape (n, dim)."""
    if n < 1 or dim < 1:
        raise ValueError("n and dim must be >= 1")
    if method == "zero":
        return np.zeros((n, dim))
    if method == "gaussian":
        return np.stack([std * rng.normal(i, 0, dim, purpose="init") for i in range(n)])
    raise ValueError(f"unknown initialisation {method!r}")


# -- evolution strategies ------------------------------------------------------

def _centered_ranks(x: np.ndarray) -> np.ndarray:
    ranks = np.empty(len(x))
    ranks[np.argsort(x, kind="stable")] = np.arange(len(x))
    return ranks / max(len(x) - 1, 1) - 0.5


def es_step(theta, cfg: EsConfig, scorer, rng, k: int = 0) -> np.ndarray:
    """One ES iteration: perturb, score, move along the reward-weighted noise.

    Returns the new centre. Raises BudgetExhausted without consuming passes
    if fewer than ``cfg.population`` remain.
    """
    theta = np.asarray(theta, dtype=float)
    n, dim = cfg.population, theta.shape[0]
    eps = np.stack([rng.normal(i, k, dim) for i in range(n)])
    losses = np.asarray(scorer.batch(theta + cfg.noise_std * eps), dtype=float)
    rewards = -losses
    finite = np.isfinite(rewards)
    if not finite.any():
        return theta.copy()
    # a divergent individual contributes like the worst finite one
    rewards = np.where(finite, rewards, rewards[finite].min())
    if cfg.rank_shaping:
        rewards = _centered_ranks(rewards)
    elif cfg.reward_baseline:
        rewards = rewards - rewards.mean()
    return theta + cfg.learning_rate / (cfg.noise_std * n) * (rewards @ eps)


@dataclass
class TrainResult:
    theta: np.ndarray
    history: list[float] = field(default_factory=list)
    iterations: int = 0
    exhausted: bool = False


def train_es(theta0, cfg: EsConfig, scorer, rng) -> TrainResult:
    """Run up to ``cfg.max_iterations`` ES steps; the final centre is the model.

    ``history`` records the mean population loss per completed iteration.
    """
    theta = np.array(theta0, dtype=float)
    result = TrainResult(theta)
    tracker = _LossTracker(scorer)
    for k in range(cfg.max_iterations):
        try:
            theta = es_step(theta, cfg, tracker, rng, k)
        except BudgetExhausted:
            result.exhausted = True
            break
        result.history.append(tracker.last_mean)
        result.iterations = k + 1
    result.theta = theta
    return result


class _LossTracker:
    def __init__(self, scorer):
        self.scorer = scorer
        self.last_mean = math.inf

    def batch(self, thetas):
        losses = np.asarray(self.scorer.batch(thetas), dtype=float)
        finite = losses[np.isfinite(losses)]
        self.last_mean = float(finite.mean()) if finite.size else math.inf
        return losses


# -- neuroparticle swarm -------------------------------------------------------

@dataclass
class Particle:
    position: np.ndarray
    velocity: np.ndarray
    local_best: np.ndarray
    local_best_loss: float


@dataclass
class SwarmState:
    """Swarm stored as stacked arrays, one row per particle."""

    positions: np.ndarray
    velocities: np.ndarray
    local_best: np.ndarray
    local_best_loss: np.ndarray
    global_best: np.ndarray
    global_best_loss: float = math.inf
    iteration: int = 0

    @property
    def particles(self) -> list[Particle]:
        return [
            Particle(self.positions[i], self.velocities[i], self.local_best[i], float(self.local_best_loss[i]))
            for i in range(len(self.positions))
        ]

    def copy(self) -> SwarmState:
        return SwarmState(
            self.positions.copy(),
            self.velocities.copy(),
            self.local_best.copy(),
            self.local_best_loss.copy(),
            self.global_best.copy(),
            self.global_best_loss,
            self.iteration,
        )


def init_swarm(cfg: NpsoConfig, dim: int, rng) -> SwarmState:
    """Positions ~ N(0, init_std^2 I); velocities, bests and best positions at zero."""
    n = cfg.population
    return SwarmState(
        positions=initialize_population("gaussian", n, dim, rng, cfg.init_std),
        velocities=np.zeros((n, dim)),
        local_best=np.zeros((n, dim)),
        local_best_loss=np.full(n, math.inf),
        global_best=np.zeros(dim),
    )


def npso_step(state: SwarmState, cfg: NpsoConfig, scorer, rng, k: int | None = None) -> SwarmState:
    """Velocity and position update for every particle, then strict-improvement bookkeeping.

    The attraction coefficients are scalar draws per particle and iteration
    broadcast over all coordinates, unless ``cfg.per_coordinate`` is set.
    Returns a new state; the input state is left untouched.
    """
    k = state.iteration + 1 if k is None else k
    n, dim = state.positions.shape
    size = dim if cfg.per_coordinate else None
    u1 = np.array([rng.uniform(i, k, "npso-u1", size) for i in range(n)]).reshape(n, -1)
    u2 = np.array([rng.uniform(i, k, "npso-u2", size) for i in range(n)]).reshape(n, -1)
    velocities = (
        cfg.inertial_weight * state.velocities
        + cfg.cognitive * u1 * (state.local_best - state.positions)
        + cfg.social * u2 * (state.global_best - state.positions)
    )
    positions = state.positions + velocities
    losses = np.asarray(scorer.batch(positions), dtype=float)
    losses = np.where(np.isfinite(losses), losses, math.inf)

    new = state.copy()
    new.positions, new.velocities, new.iteration = positions, velocities, k
    for i in range(n):
        if losses[i] < new.local_best_loss[i]:
            new.local_best[i] = positions[i]
            new.local_best_loss[i] = losses[i]
            if new.local_best_loss[i] < new.global_best_loss:
                new.global_best = positions[i].copy()
                new.global_best_loss = float(losses[i])
    return new


def train_npso(cfg: NpsoConfig, dim: int, scorer, rng, state: SwarmState | None = None) -> tuple[TrainResult, SwarmState]:
    """Run the swarm; the model is the global best position after the last iteration.

    ``history`` records the global best loss after each iteration.
    """
    state = init_swarm(cfg, dim, rng) if state is None else state
    result = TrainResult(state.global_best)
    for _ in range(cfg.max_iterations):
        try:
            state = npso_step(state, cfg, scorer, rng)
        except BudgetExhausted:
            result.exhausted = True
            break
        result.history.append(state.global_best_loss)
        result.iterations += 1
    result.theta = state.global_best.copy()
    return result, state


# -- SGD baseline --------------------------------------------------------------

def split_mse(spec, layout, theta, dataset, split: str) -> float:
    """Warm-started MSE on one split: the model runs from the series start."""
    x, y, times, offset = dataset.context(split)
    preds, _ = forward_population(spec, layout, theta, x, times)
    return float(mse_per_individual(preds[..., offset:, :], y))


@dataclass
class SgdResult:
    theta: np.ndarray
    best_val: float
    epochs: int
    history: list[tuple[float, float]] = field(default_factory=list)
    diverged: bool = False
    exhausted: bool = False


def sgd_train(cfg: SgdConfig, dataset, spec, layout, meter, rng=None, theta0=None) -> SgdResult:
    """Adam on stateful truncated BPTT; returns the best-validation weights.

    The training split is cut into consecutive windows of
    ``cfg.truncation_length`` steps. State is carried from one window to the
    next but gradients stop at each window start. ``minibatch_size``
    consecutive windows are averaged per Adam update. Each epoch costs one
    pass from ``meter``.
    """
    if spec.kind != "lstm":
        raise NotImplementedError(f"SGD baseline has no gradients for {spec.kind!r}")
    if theta0 is None:
        theta0 = init_weights(spec, layout, rng.generator("sgd-init"))
    theta = np.array(theta0, dtype=float)
    mask = np.ones(layout.size)
    if cfg.trainable is not None:
        mask[:] = 0.0
        for name in cfg.trainable:
            mask[layout.slice(name)] = 1.0

    x, y, times = dataset.segment("train")
    L = cfg.truncation_length
    windows = [(s, min(s + L, len(y))) for s in range(0, len(y), L)]
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    step = 0
    best_theta, best_val = theta.copy(), split_mse(spec, layout, theta, dataset, "val")
    result = SgdResult(best_theta, best_val, 0)
    stale = 0
    for epoch in range(cfg.max_epochs):
        try:
            meter.charge(1)
        except BudgetExhausted:
            result.exhausted = True
            break
        state = zero_state(spec)
        losses = []
        try:
            for first in range(0, len(windows), cfg.minibatch_size):
                chunk = windows[first : first + cfg.minibatch_size]
                grad = np.zeros_like(theta)
                for lo, hi in chunk:
                    g, loss, state = lstm_bptt_gradient(spec, layout, theta, x[lo:hi], y[lo:hi], state, return_state=True)
                    grad += g
                    losses.append(loss)
                grad = mask * grad / len(chunk)
                if not np.all(np.isfinite(grad)):
                    raise DivergenceError("non-finite gradient")
                step += 1
                m = cfg.beta1 * m + (1 - cfg.beta1) * grad
                v = cfg.beta2 * v + (1 - cfg.beta2) * grad**2
                mhat = m / (1 - cfg.beta1**step)
                vhat = v / (1 - cfg.beta2**step)
                theta = theta - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.epsilon)
        except DivergenceError:
            result.diverged = True
            result.epochs = epoch + 1
            break
        val = split_mse(spec, layout, theta, dataset, "val")
        result.history.append((float(np.mean(losses)), val))
        result.epochs = epoch + 1
        if val < best_val:
            best_val, best_theta, stale = val, theta.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    result.theta, result.best_val = best_theta, best_val
    return result
