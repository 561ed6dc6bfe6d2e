"""Recurrent cells evaluated directly from a flat parameter vector.

Three architectures share one calling convention: LSTM, Phased LSTM (LSTM
plus a periodic time gate) and the Fourier Recurrent Unit. Every forward
function accepts either a single parameter vector of length ``C`` or a
population matrix of shape ``(N, C)``; the population path is what the
gradient-free trainers use, since it scores all individuals of an
iteration in one vectorised sweep over the sequence.

Only the LSTM has an analytic truncated-BPTT gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CellSpec",
    "CellState",
    "DivergenceError",
    "WeightLayout",
    "forward_population",
    "forward_sequence",
    "forward_step",
    "init_weights",
    "layout_for",
    "lstm_bptt_gradient",
    "zero_state",
]

KINDS = ("lstm", "plstm", "fru")


class DivergenceError(ArithmeticError):
    """A forward pass produced a non-finite value."""


@dataclass(frozen=True)
class CellSpec:
    kind: str
    input_dim: int
    hidden_dim: int
    output_dim: int = 1
    fru_frequencies: tuple[float, ...] = ()
    fru_horizon: float = 1000.0
    plstm_period: float = 13.0
    plstm_open_ratio: float = 0.25
    plstm_leak: float = 1e-3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown cell kind {self.kind!r}; expected one of {KINDS}")
        for name in ("input_dim", "hidden_dim", "output_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        object.__setattr__(self, "fru_frequencies", tuple(float(f) for f in self.fru_frequencies))
        if (self.kind == "fru") != bool(self.fru_frequencies):
            raise ValueError("fru_frequencies must be non-empty exactly when kind == 'fru'")
        if self.fru_horizon <= 0 or self.plstm_period <= 0:
            raise ValueError("fru_horizon and plstm_period must be positive")
        if not 0.0 < self.plstm_open_ratio < 1.0:
            raise ValueError("plstm_open_ratio must lie in (0, 1)")


@dataclass(frozen=True)
class WeightLayout:
    """Ordered (name, shape) table mapping structured tensors onto a flat vector."""

    entries: tuple[tuple[str, tuple[int, ...]], ...]
    offsets: dict[str, tuple[int, int]] = field(init=False, repr=False, compare=False)
    size: int = field(init=False)

    def __post_init__(self):
        offsets, pos = {}, 0
        for name, shape in self.entries:
            if name in offsets:
                raise ValueError(f"duplicate tensor name {name!r}")
            n = math.prod(shape)
            offsets[name] = (pos, pos + n)
            pos += n
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "size", pos)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.entries)

    def shape(self, name: str) -> tuple[int, ...]:
        return dict(self.entries)[name]

    def unflatten(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        """Views into ``theta``; leading batch axes are preserved."""
        theta = np.asarray(theta)
        if theta.shape[-1] != self.size:
            raise ValueError(f"parameter vector has length {theta.shape[-1]}, layout expects {self.size}")
        lead = theta.shape[:-1]
        return {
            name: theta[..., lo:hi].reshape(lead + shape)
            for (name, shape), (lo, hi) in zip(self.entries, self.offsets.values())
        }

    def flatten(self, tensors: dict[str, np.ndarray]) -> np.ndarray:
        parts = []
        for name, shape in self.entries:
            arr = np.asarray(tensors[name], dtype=float)
            if arr.shape[arr.ndim - len(shape):] != shape:
                raise ValueError(f"tensor {name!r} has shape {arr.shape}, expected (..., {shape})")
            parts.append(arr.reshape(arr.shape[: arr.ndim - len(shape)] + (-1,)))
        return np.concatenate(parts, axis=-1)

    def slice(self, name: str) -> slice:
        lo, hi = self.offsets[name]
        return slice(lo, hi)


def layout_for(spec: CellSpec) -> WeightLayout:
    F, H, O = spec.input_dim, spec.hidden_dim, spec.output_dim
    if spec.kind in ("lstm", "plstm"):
        # gate order along the 4H axis: input, forget, output, candidate
        entries = [("W_x", (4 * H, F)), ("W_h", (4 * H, H)), ("b", (4 * H,)), ("W_y", (O, H)), ("b_y", (O,))]
        if spec.kind == "plstm":
            entries += [("tau", (H,)), ("shift", (H,)), ("ron", (H,))]
    else:
        nf = len(spec.fru_frequencies)
        entries = [
            ("W_x", (H, F)),
            ("W_u", (H, nf * H)),
            ("b", (H,)),
            ("W_s", (H, H)),
            ("b_s", (H,)),
            ("phase", (nf,)),
            ("W_y", (O, H)),
            ("b_y", (O,)),
        ]
    return WeightLayout(tuple(entries))


@dataclass
class CellState:
    hidden: np.ndarray
    memory: np.ndarray
    step_index: int = 0

    def copy(self) -> CellState:
        return CellState(self.hidden.copy(), self.memory.copy(), self.step_index)


def zero_state(spec: CellSpec, batch: tuple[int, ...] = ()) -> CellState:
    H = spec.hidden_dim
    if spec.kind == "fru":
        memory = np.zeros(batch + (len(spec.fru_frequencies), H))
    else:
        memory = np.zeros(batch + (H,))
    return CellState(np.zeros(batch + (H,)), memory, 0)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _logit(p):
    return math.log(p / (1.0 - p))


def time_gate(spec: CellSpec, w: dict[str, np.ndarray], t: float) -> np.ndarray:
    """Phased-LSTM openness k_t in [0, 1] per hidden unit.

    Period and open ratio are stored as offsets around the spec defaults so
    that an all-zero parameter vector yields the default gate.
    """
    period = spec.plstm_period * np.exp(w["tau"])
    r_on = _sigmoid(_logit(spec.plstm_open_ratio) + w["ron"])
    phi = np.mod(t - w["shift"], period) / period
    # r_on can underflow to 0 for extreme weights; those units are simply closed
    with np.errstate(divide="ignore", invalid="ignore"):
        rising = 2.0 * phi / r_on
        falling = 2.0 - 2.0 * phi / r_on
    closed = spec.plstm_leak * phi
    return np.where(phi < 0.5 * r_on, rising, np.where(phi < r_on, falling, closed))


def _recurrent_matvec(W, v):
    # W: (..., m, n), v: (..., n) -> (..., m)
    return np.matmul(W, v[..., None])[..., 0]


def _step(spec, w, h, c, xproj, t, gate_override=None):
    """One recursion step on batched state. ``xproj`` is W_x @ x_t already."""
    H = spec.hidden_dim
    if spec.kind == "fru":
        u_flat = c.reshape(c.shape[:-2] + (-1,))
        h_new = np.tanh(xproj + _recurrent_matvec(w["W_u"], u_flat) + w["b"])
        summary = np.tanh(_recurrent_matvec(w["W_s"], h_new) + w["b_s"])
        freqs = np.asarray(spec.fru_frequencies)
        basis = np.cos(2.0 * np.pi * freqs * t / spec.fru_horizon + w["phase"])
        c_new = c + (basis[..., :, None] * summary[..., None, :]) / spec.fru_horizon
    else:
        z = xproj + _recurrent_matvec(w["W_h"], h) + w["b"]
        i = _sigmoid(z[..., :H])
        f = _sigmoid(z[..., H : 2 * H])
        o = _sigmoid(z[..., 2 * H : 3 * H])
        g = np.tanh(z[..., 3 * H :])
        c_new = f * c + i * g
        h_new = o * np.tanh(c_new)
        if spec.kind == "plstm":
            k = time_gate(spec, w, t) if gate_override is None else gate_override
            c_new = k * c_new + (1.0 - k) * c
            h_new = k * h_new + (1.0 - k) * h
    y = _recurrent_matvec(w["W_y"], h_new) + w["b_y"]
    return h_new, c_new, y


def forward_step(spec, layout, theta, state, x_t, t=None, gate_override=None):
    """Advance one step for a single parameter vector.

    Returns ``(new_state, y_t)``. ``t`` defaults to ``state.step_index``.
    Raises DivergenceError if the new state is not finite.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise ValueError("forward_step expects a single parameter vector")
    w = layout.unflatten(theta)
    t = state.step_index if t is None else t
    x_t = np.asarray(x_t, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        h, c, y = _step(spec, w, state.hidden, state.memory, w["W_x"] @ x_t, t, gate_override)
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(c)) and np.all(np.isfinite(y))):
        raise DivergenceError(f"non-finite state at step {state.step_index}")
    return CellState(h, c, state.step_index + 1), y


def forward_population(spec, layout, thetas, inputs, times=None, state=None, gate_override=None):
    """Run every parameter vector in ``thetas`` over the whole input sequence.

    ``thetas`` is ``(C,)`` or ``(N, C)``; ``inputs`` is ``(T, F)``. Returns
    predictions shaped ``thetas.shape[:-1] + (T, O)`` and the final state.
    Non-finite values are left in place for the caller to inspect.
    """
    thetas = np.asarray(thetas, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_dim:
        raise ValueError(f"inputs must be (T, {spec.input_dim}), got {inputs.shape}")
    lead = thetas.shape[:-1]
    w = layout.unflatten(thetas)
    if state is None:
        state = zero_state(spec, lead)
    T = inputs.shape[0]
    if times is None:
        times = state.step_index + np.arange(T, dtype=float)
    xproj = np.matmul(w["W_x"], inputs.T)  # (..., G, T)
    h, c = state.hidden, state.memory
    preds = np.empty(lead + (T, spec.output_dim))
    with np.errstate(over="ignore", invalid="ignore"):
        for s in range(T):
            h, c, y = _step(spec, w, h, c, xproj[..., s], times[s], gate_override)
            preds[..., s, :] = y
    return preds, CellState(h, c, state.step_index + T)


def forward_sequence(spec, layout, theta, inputs, times=None, state=None, gate_override=None, return_state=False):
    """Full untruncated forward pass for one parameter vector.

    Emits one prediction per input row, shape ``(T, O)``. Raises
    DivergenceError when any prediction or the final state is non-finite.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise ValueError("forward_sequence expects a single parameter vector; use forward_population")
    preds, final = forward_population(spec, layout, theta, inputs, times, state, gate_override)
    if not (np.all(np.isfinite(preds)) and np.all(np.isfinite(final.hidden)) and np.all(np.isfinite(final.memory))):
        raise DivergenceError("non-finite values in forward pass")
    return (preds, final) if return_state else preds


def lstm_bptt_gradient(spec, layout, theta, features, targets, state=None, return_state=False):
    """Exact gradient of the window MSE for an LSTM, holding ``state`` fixed.

    The window loss is ``mean((y_t - target_t)**2)`` over all steps and
    outputs. Backpropagation stops at the window start. With
    ``return_state=True`` the result is ``(grad, loss, final_state)``.
    """
    if spec.kind != "lstm":
        raise ValueError("analytic BPTT is only available for the LSTM")
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(features, dtype=float)
    r = np.asarray(targets, dtype=float).reshape(x.shape[0], spec.output_dim)
    H, L = spec.hidden_dim, x.shape[0]
    w = layout.unflatten(theta)
    Wx, Wh, b, Wy, by = w["W_x"], w["W_h"], w["b"], w["W_y"], w["b_y"]
    if state is None:
        state = zero_state(spec)

    hs = np.empty((L + 1, H))
    cs = np.empty((L + 1, H))
    gates = np.empty((L, 4 * H))
    ys = np.empty((L, spec.output_dim))
    hs[0], cs[0] = state.hidden, state.memory
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(L):
            z = Wx @ x[t] + Wh @ hs[t] + b
            a = np.concatenate([_sigmoid(z[: 3 * H]), np.tanh(z[3 * H :])])
            i, f, o, g = a[:H], a[H : 2 * H], a[2 * H : 3 * H], a[3 * H :]
            cs[t + 1] = f * cs[t] + i * g
            hs[t + 1] = o * np.tanh(cs[t + 1])
            gates[t] = a
            ys[t] = Wy @ hs[t + 1] + by
    if not (np.all(np.isfinite(ys)) and np.all(np.isfinite(cs))):
        raise DivergenceError("non-finite values in BPTT forward pass")

    resid = ys - r
    loss = float(np.mean(resid**2))
    dy = 2.0 * resid / resid.size
    grads = {name: np.zeros(shape) for name, shape in layout.entries}
    grads["W_y"] = dy.T @ hs[1:]
    grads["b_y"] = dy.sum(axis=0)
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    for t in reversed(range(L)):
        a = gates[t]
        i, f, o, g = a[:H], a[H : 2 * H], a[2 * H : 3 * H], a[3 * H :]
        tc = np.tanh(cs[t + 1])
        dh = Wy.T @ dy[t] + dh_next
        dc = dh * o * (1.0 - tc**2) + dc_next
        dz = np.concatenate(
            [
                dc * g * i * (1.0 - i),
                dc * cs[t] * f * (1.0 - f),
                dh * tc * o * (1.0 - o),
                dc * i * (1.0 - g**2),
            ]
        )
        grads["W_x"] += np.outer(dz, x[t])
        grads["W_h"] += np.outer(dz, hs[t])
        grads["b"] += dz
        dh_next = Wh.T @ dz
        dc_next = dc * f
    grad = layout.flatten(grads)
    if return_state:
        return grad, loss, CellState(hs[L].copy(), cs[L].copy(), state.step_index + L)
    return grad


def init_weights(spec: CellSpec, layout: WeightLayout, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform kernels, orthogonal recurrent blocks, forget bias 1.0."""
    H = spec.hidden_dim
    tensors = {}
    for name, shape in layout.entries:
        if len(shape) == 2:
            fan_out, fan_in = shape
            r = math.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-r, r, size=shape)
        else:
            tensors[name] = np.zeros(shape)
    if spec.kind in ("lstm", "plstm"):
        blocks = []
        for _ in range(4):
            q, rr = np.linalg.qr(rng.standard_normal((H, H)))
            blocks.append(q * np.sign(np.diag(rr)))
        tensors["W_h"] = np.concatenate(blocks, axis=0)
        tensors["b"][H : 2 * H] = 1.0
    else:
        q, rr = np.linalg.qr(rng.standard_normal((H, H)))
        tensors["W_s"] = q * np.sign(np.diag(rr))
    return layout.flatten(tensors)
