"""Dense-tensor substrate: validation, seeded RNG streams, time embedding,
a tanh MLP vector field with hand-written backprop, AdamW and LR schedules.

Tensors are plain float64 numpy arrays. Batched calls take ``x`` of shape
``(B, d)`` and ``t`` of shape ``(B,)``; unbatched ``(d,)`` with a scalar ``t``
is accepted everywhere and returns unbatched results.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DivergenceError, ShapeError

# ---------------------------------------------------------------------------
# tensors and randomness


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Copy ``x`` into a float64 array and reject NaN/Inf."""
    a = np.array(x, dtype=np.float64)
    check_finite(a, name)
    return a


def check_finite(a: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(np.asarray(a)))
        where = tuple(int(i) for i in bad[0]) if bad.size else ()
        raise DivergenceError(f"{name} has non-finite entries (first at index {where})")
    return a


def make_rng(seed: int, *streams: str) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` forked by stream labels.

    The same (seed, streams) always yields the same bit stream; distinct labels
    give independent streams so subsystems never share draws.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    key += [zlib.crc32(s.encode("utf-8")) for s in streams]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


# ---------------------------------------------------------------------------
# time embedding


def time_embed(t, width: int) -> np.ndarray:
    """Sinusoidal embedding: entry 2k = sin(t w_k), 2k+1 = cos(t w_k), w_k = 10000^(-2k/width).

    ``t`` may be a scalar (returns ``(width,)``) or a 1-D array (returns ``(B, width)``).
    """
    if not isinstance(width, (int, np.integer)) or width < 2 or width % 2:
        raise ConfigError(f"time embedding width must be an even integer >= 2, got {width!r}")
    tt = np.asarray(t, dtype=np.float64)
    k = np.arange(width // 2, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * k / width)
    phase = tt[..., None] * omega
    out = np.empty(tt.shape + (width,), dtype=np.float64)
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


# ---------------------------------------------------------------------------
# vector field network


@dataclass
class VectorFieldNet:
    """Time-conditioned MLP ``u(x, t)``.

    ``widths[0]`` is the concatenated input width (state dim + ``time_width``),
    ``widths[-1]`` the output width. Hidden layers use tanh, the output layer is
    affine. Weights are stored ``(fan_in, fan_out)`` so a layer is ``h @ W + b``.
    """

    widths: tuple[int, ...]
    time_width: int
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2:
            raise ConfigError("a network needs at least an input and an output width")
        if self.time_width < 2 or self.time_width % 2:
            raise ConfigError(f"time_width must be even and >= 2, got {self.time_width}")
        if self.widths[0] <= self.time_width:
            raise ConfigError("input width must exceed the time embedding width")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[i], self.widths[i + 1]) or b.shape != (self.widths[i + 1],):
                raise ShapeError(f"layer {i} parameter shapes {w.shape}, {b.shape} do not match widths")
        if len(self.weights) != len(self.widths) - 1:
            raise ShapeError("one weight matrix per layer is required")

    @classmethod
    def init(cls, state_dim: int, hidden: Sequence[int], time_width: int, rng,
             out_dim: int | None = None, out_scale: float = 1.0) -> "VectorFieldNet":
        """LeCun-normal weights, zero biases; the output layer is scaled by ``out_scale``."""
        out_dim = state_dim if out_dim is None else out_dim
        widths = (state_dim + time_width, *hidden, out_dim)
        weights, biases = [], []
        for i in range(len(widths) - 1):
            w = rng.standard_normal((widths[i], widths[i + 1])) / math.sqrt(widths[i])
            if i == len(widths) - 2:
                w = w * out_scale
            weights.append(w)
            biases.append(np.zeros(widths[i + 1]))
        return cls(widths, time_width, weights, biases)

    @classmethod
    def zeros(cls, widths: Sequence[int], time_width: int) -> "VectorFieldNet":
        widths = tuple(widths)
        return cls(widths, time_width,
                   [np.zeros((widths[i], widths[i + 1])) for i in range(len(widths) - 1)],
                   [np.zeros(widths[i + 1]) for i in range(len(widths) - 1)])

    @property
    def state_dim(self) -> int:
        return self.widths[0] - self.time_width

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.weights)):
            names += [f"layer{i}.weight", f"layer{i}.bias"]
        return names

    def with_params(self, params: Sequence[np.ndarray]) -> "VectorFieldNet":
        params = list(params)
        return VectorFieldNet(self.widths, self.time_width, params[0::2], params[1::2])

    def copy(self) -> "VectorFieldNet":
        return self.with_params([p.copy() for p in self.params])

    def n_params(self) -> int:
        return param_count(self.widths)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def from_flat(self, vec) -> "VectorFieldNet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params(),):
            raise ShapeError(f"expected {self.n_params()} parameters, got shape {vec.shape}")
        params, pos = [], 0
        for p in self.params:
            params.append(vec[pos: pos + p.size].reshape(p.shape).copy())
            pos += p.size
        return self.with_params(params)

    def __call__(self, x, t):
        return forward(self, x, t)


def param_count(widths: Sequence[int]) -> int:
    return sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(len(widths) - 1))


def _batched(net: VectorFieldNet, x, t):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != net.state_dim:
        raise ShapeError(f"state has shape {x.shape}; network expects width {net.state_dim}")
    tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],))
    return xb, tb, single


def _activations(net: VectorFieldNet, xb: np.ndarray, tb: np.ndarray) -> list[np.ndarray]:
    h = np.concatenate([xb, time_embed(tb, net.time_width)], axis=1)
    acts = [h]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        h = z if i == last else np.tanh(z)
        acts.append(h)
    return acts


def forward(net: VectorFieldNet, x, t) -> np.ndarray:
    xb, tb, single = _batched(net, x, t)
    out = _activations(net, xb, tb)[-1]
    return out[0] if single else out


def forward_cached(net: VectorFieldNet, x, t) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batched forward that also returns the layer activations for :func:`backward`."""
    xb, tb, _ = _batched(net, x, t)
    acts = _activations(net, xb, tb)
    return acts[-1], acts


def backward(net: VectorFieldNet, x, t, grad_out, cache=None) -> list[np.ndarray]:
    """Gradients of ``sum(grad_out * forward(net, x, t))`` w.r.t. ``net.params``.

    Batched inputs are reduced by summation over the batch in a fixed order.
    ``cache`` is the activation list from :func:`forward_cached` on the same inputs.
    """
    xb, tb, single = _batched(net, x, t)
    g = np.asarray(grad_out, dtype=np.float64)
    g = g[None, :] if single else g
    if g.shape != (xb.shape[0], net.out_dim):
        raise ShapeError(f"grad_out shape {np.shape(grad_out)} does not match output width {net.out_dim}")
    acts = _activations(net, xb, tb) if cache is None else cache
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))  # type: ignore[list-item]
    delta = g
    for i in range(len(net.weights) - 1, -1, -1):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i:
            delta = (delta @ net.weights[i].T) * (1.0 - acts[i] ** 2)
    return grads


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.99, eps=1e-8, weight_decay=0.0):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   0, beta1, beta2, eps, weight_decay)


def adamw_step(state: OptimizerState, params, grads, lr: float, names=None) -> list[np.ndarray]:
    """One AdamW update with bias correction and decoupled weight decay.

    Returns fresh parameter arrays; ``state`` moments and counter are advanced in place.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    names = names or [f"param{i}" for i in range(len(params))]
    for name, p, g, m in zip(names, params, grads, state.m):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} / moment {m.shape} vs parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in parameter {name} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        out.append(p * (1.0 - lr * state.weight_decay) - lr * update)
    return out


LR_SCHEDULES = ("constant", "linear", "cosine")


def lr_schedule(kind: str, step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ConfigError("lr schedule needs total_steps > 0")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    frac = step / total_steps
    if kind == "constant":
        return base_lr
    if kind == "linear":
        return base_lr * (1.0 - frac)
    if kind == "cosine":
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    raise ConfigError(f"unknown lr schedule {kind!r}; expected one of {LR_SCHEDULES}")
