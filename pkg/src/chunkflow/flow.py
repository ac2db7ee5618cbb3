"""Current-to-succeeding chunk flow matching.

Training variants (all fine-tune or train a :class:`VectorFieldNet` on the
straight path x_t = (1 - t) x0 + t x1 with target velocity x1 - x0):

``alg1_oc_ti``
    inherent (same-video consecutive) pairs; with probability rho the source is
    replaced by mu0 + sigma0 * x1_hat, where x1_hat is the backward-ODE inverse
    of the target under the frozen pretrained field.
``alg2_plain``
    x0 and x1 drawn independently from the current/succeeding chunk pools.
``alg3_oc_only``
    inherent pairs without target inversion.
``conventional_baseline``
    conditioning chunk concatenated with a noisy target (noise -> data), the
    comparison arm with twice the input width.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import fileio
from .coupling import CouplingStrategy, draw_coupled_batch
from .errors import ConfigError, DivergenceError, ShapeError
from .numerics import (
    OptimizerState, VectorFieldNet, adamw_step, backward, forward, forward_cached,
    lr_schedule, make_rng,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("alg1_oc_ti", "alg2_plain", "alg3_oc_only", "conventional_baseline")
REQUIRED_COUPLING = {
    "alg1_oc_ti": "inherent",
    "alg2_plain": "independent",
    "alg3_oc_only": "inherent",
    "conventional_baseline": "inherent",
}


# ---------------------------------------------------------------------------
# building blocks


def interpolate(x0, x1, t):
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeError(f"interpolate: x0 {x0.shape} vs x1 {x1.shape}")
    tt = np.asarray(t, dtype=np.float64)
    if tt.ndim == 1 and x0.ndim > 1:
        tt = tt.reshape(-1, *([1] * (x0.ndim - 1)))
    return (1.0 - tt) * x0 + tt * x1


def _sq_loss(net: VectorFieldNet, state, t, target, weight=None):
    """Mean-over-batch, sum-over-dims squared error and its parameter gradients."""
    state = np.atleast_2d(state)
    target = np.atleast_2d(target)
    pred, cache = forward_cached(net, state, t)
    resid = pred - target
    if weight is not None:
        resid = resid * weight
    b = state.shape[0]
    loss = float(np.sum(resid * resid) / b)
    if not math.isfinite(loss):
        raise DivergenceError("non-finite loss")
    grad_out = 2.0 * resid / b
    if weight is not None:
        grad_out = grad_out * weight
    return loss, backward(net, state, t, grad_out, cache=cache)


def cfm_loss(net: VectorFieldNet, x0, x1, t):
    """Conditional flow matching loss ||u(x_t, t) - (x1 - x0)||^2 and its gradients."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (x0.shape[0],))
    return _sq_loss(net, interpolate(x0, x1, tb), tb, x1 - x0)


@dataclass
class TimestepSampler:
    kind: str = "uniform"
    loc: float = 0.0
    scale: float = 1.0
    shift: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "logit_normal"):
            raise ConfigError(f"unknown timestep sampler {self.kind!r}")
        if self.kind == "logit_normal" and self.scale <= 0:
            raise ConfigError(f"logit-normal scale must be positive, got {self.scale}")
        if self.shift < 1:
            raise ConfigError(f"timestep shift must be >= 1, got {self.shift}")

    def sample(self, rng, size=None):
        if self.kind == "uniform":
            # (k + 0.5) / 2^53 is strictly inside (0, 1)
            t = (rng.integers(0, 2 ** 53, size=size) + 0.5) / 2.0 ** 53
        else:
            z = rng.standard_normal(size)
            t = 1.0 / (1.0 + np.exp(-(self.loc + self.scale * z)))
            t = np.clip(t, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
        return shift_time(t, self.shift)


def shift_time(t, shift: float):
    if shift == 1.0:
        return t
    return shift * t / (1.0 + (shift - 1.0) * t)


def sample_t(sampler: TimestepSampler, rng) -> float:
    return float(sampler.sample(rng))


@dataclass
class LatentCodec:
    """Identity codec; ``sigma0`` plays the role of the encoder's posterior scale."""

    kind: str = "identity"
    sigma0: float | np.ndarray = 0.3

    def __post_init__(self):
        if self.kind != "identity":
            raise ConfigError(f"only the identity codec is available, got {self.kind!r}")
        if np.any(np.asarray(self.sigma0) < 0):
            raise ConfigError("sigma0 must be non-negative")

    def encode(self, x):
        mu = np.asarray(x, dtype=np.float64)
        return mu, np.broadcast_to(np.asarray(self.sigma0, dtype=np.float64), mu.shape)

    def decode(self, z):
        return np.asarray(z, dtype=np.float64)


def apply_target_inversion(mu0, sigma0, x1_hat, rho: float, rng):
    """Per-row: with probability ``rho`` return mu0 + sigma0 * x1_hat, else mu0."""
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"rho must lie in [0, 1], got {rho}")
    mu0 = np.asarray(mu0, dtype=np.float64)
    x1_hat = np.asarray(x1_hat, dtype=np.float64)
    if mu0.shape != x1_hat.shape:
        raise ShapeError(f"mu0 {mu0.shape} vs x1_hat {x1_hat.shape}")
    single = mu0.ndim == 1
    n = 1 if single else mu0.shape[0]
    p = rng.random(n)
    use = p < rho
    mixed = mu0 + np.asarray(sigma0, dtype=np.float64) * x1_hat
    if single:
        return mixed if use[0] else mu0.copy()
    keep = use.reshape(-1, *([1] * (mu0.ndim - 1)))
    return np.where(keep, mixed, mu0)


# ---------------------------------------------------------------------------
# ODE integration


def euler_integrate(net: VectorFieldNet, x, nfe: int, *, record: bool = False, field_fn=None):
    """Forward Euler from t=0 to t=1 on a uniform grid with ``nfe`` steps.

    Returns the terminal state, or ``(terminal, states, t_grid)`` when ``record``.
    """
    if nfe < 1:
        raise ConfigError(f"nfe must be >= 1, got {nfe}")
    fn = field_fn or (lambda s, t: forward(net, s, t))
    x = np.array(x, dtype=np.float64)
    dt = 1.0 / nfe
    states = [x.copy()] if record else None
    for k in range(nfe):
        x = x + dt * fn(x, k * dt)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"Euler state became non-finite at step {k + 1} of {nfe}")
        if record:
            states.append(x.copy())
    if record:
        return x, states, np.linspace(0.0, 1.0, nfe + 1)
    return x


def invert_target(net, x1, steps: int = 50, order: int = 2, r: float = 0.5, *, field_fn=None):
    """Integrate the learned ODE backward from t=1 to t=0.

    Order 1 is backward Euler-explicit: x <- x - dt v(x, t). Order 2 adds a
    Taylor term with the time derivative of v estimated by a finite difference
    along the backward path (step h = -dt, probe at fraction ``r`` of it).
    """
    if steps < 1:
        raise ConfigError(f"inversion needs steps >= 1, got {steps}")
    if order not in (1, 2):
        raise ConfigError(f"inversion order must be 1 or 2, got {order}")
    if not 0.0 < r <= 1.0:
        raise ConfigError(f"probe fraction r must lie in (0, 1], got {r}")
    fn = field_fn or (lambda s, t: forward(net, s, t))
    x = np.array(x1, dtype=np.float64)
    h = -1.0 / steps
    for k in range(steps):
        t = 1.0 + k * h
        v1 = fn(x, t)
        if order == 1:
            x = x + h * v1
        else:
            probe = x + r * h * v1
            v2 = fn(probe, t + r * h)
            dv = (v2 - v1) / (r * h)
            x = x + h * v1 + 0.5 * h * h * dv
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"inversion state became non-finite at step {k + 1} of {steps}")
    return x


def sample_continuation(net: VectorFieldNet, x0, nfe: int, codec: LatentCodec | None = None, *,
                        return_trajectory: bool = False):
    """Continue chunk ``x0`` by integrating the field from t=0 to t=1."""
    codec = codec or LatentCodec()
    mu0, _ = codec.encode(x0)
    shape = mu0.shape
    if mu0.size % net.state_dim:
        raise ShapeError(f"input of size {mu0.size} does not fit network width {net.state_dim}")
    flat = mu0.reshape(-1, net.state_dim)
    if return_trajectory:
        end, states, grid = euler_integrate(net, flat, nfe, record=True)
        return codec.decode(end).reshape(shape), states, grid
    return codec.decode(euler_integrate(net, flat, nfe)).reshape(shape)


def rollout(net: VectorFieldNet, x0, n_chunks: int, nfe: int, codec: LatentCodec | None = None) -> list:
    if n_chunks < 1:
        raise ConfigError(f"rollout needs n_chunks >= 1, got {n_chunks}")
    out, cur = [], np.asarray(x0, dtype=np.float64)
    for k in range(n_chunks):
        try:
            cur = sample_continuation(net, cur, nfe, codec)
        except DivergenceError as exc:
            raise DivergenceError(f"rollout diverged on chunk {k + 1}: {exc}") from exc
        out.append(cur)
    return out


def sample_conventional(net: VectorFieldNet, x0, nfe: int, rng, *, noise=None):
    """Baseline sampler: fixed conditioning half, noise half integrated to data."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64).reshape(-1, net.state_dim // 2))
    d = x0.shape[1]
    if net.state_dim != 2 * d:
        raise ShapeError(f"conventional net expects state width {net.state_dim}, got 2 x {d}")
    z = rng.standard_normal(x0.shape) if noise is None else np.atleast_2d(noise)

    def field_fn(s, t):
        full = np.concatenate([x0, s], axis=1)
        return forward(net, full, t)[:, d:]

    return euler_integrate(net, z, nfe, field_fn=field_fn)


# ---------------------------------------------------------------------------
# checkpoints and the inversion cache


def net_hash(net: VectorFieldNet) -> str:
    h = hashlib.sha256()
    h.update(repr((net.widths, net.time_width)).encode())
    h.update(net.flat().astype("<f8").tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(net: VectorFieldNet, stem, *, step: int = 0, recipe_hash: str = "", kind: str = "direct") -> Path:
    stem = Path(stem)
    fileio.save_tensor(stem.with_suffix(".fc2s"), net.flat())
    header = [
        f"widths={','.join(str(w) for w in net.widths)}",
        f"time_width={net.time_width}",
        f"kind={kind}",
        f"step={step}",
        f"recipe_hash={recipe_hash}",
        f"net_hash={net_hash(net)}",
    ]
    stem.with_suffix(".txt").write_text("\n".join(header) + "\n")
    return stem.with_suffix(".fc2s")


def load_checkpoint(path) -> tuple[VectorFieldNet, dict]:
    path = Path(path)
    stem = path.with_suffix("")
    header_path = stem.with_suffix(".txt")
    if not header_path.exists() or not stem.with_suffix(".fc2s").exists():
        raise ConfigError(f"checkpoint {path} not found (need .fc2s and .txt)")
    meta = dict(line.split("=", 1) for line in header_path.read_text().splitlines() if "=" in line)
    widths = [int(w) for w in meta["widths"].split(",")]
    net = VectorFieldNet.zeros(widths, int(meta["time_width"])).from_flat(
        fileio.load_tensor(stem.with_suffix(".fc2s")))
    return net, meta


class InversionCache:
    """Inverted targets keyed by (pretrained net hash, pair id), optionally mirrored on disk."""

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory else None
        self._mem: dict[tuple[str, tuple], np.ndarray] = {}

    def _path(self, key_hash: str, pair_id) -> Path:
        return self.directory / key_hash / ("_".join(str(p) for p in pair_id) + ".fc2s")

    def get(self, key_hash: str, pair_id):
        key = (key_hash, tuple(pair_id))
        if key in self._mem:
            return self._mem[key]
        if self.directory is not None and self._path(key_hash, pair_id).exists():
            self._mem[key] = fileio.load_tensor(self._path(key_hash, pair_id))
            return self._mem[key]
        return None

    def put(self, key_hash: str, pair_id, value) -> None:
        self._mem[(key_hash, tuple(pair_id))] = value
        if self.directory is not None:
            fileio.save_tensor(self._path(key_hash, pair_id), value)

    def invert_all(self, net, x1_rows, pair_ids, steps=50, order=2, r=0.5) -> np.ndarray:
        key_hash = f"{net_hash(net)}-s{steps}o{order}r{r}"
        out = np.empty_like(np.asarray(x1_rows, dtype=np.float64))
        missing = []
        for i, pid in enumerate(pair_ids):
            hit = self.get(key_hash, pid)
            if hit is None:
                missing.append(i)
            else:
                out[i] = hit
        if missing:
            try:
                inv = invert_target(net, x1_rows[missing], steps, order, r)
            except DivergenceError as exc:
                raise DivergenceError(f"target inversion diverged: {exc}") from exc
            for j, i in enumerate(missing):
                out[i] = inv[j]
                self.put(key_hash, pair_ids[i], inv[j])
        return out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainRecipe:
    algorithm: str = "alg1_oc_ti"
    coupling: str = "inherent"
    rho: float = 0.7
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-4
    lr_schedule: str = "linear"
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    init: str = "pretrained"
    timestep: TimestepSampler = field(default_factory=TimestepSampler)
    sigma0: float = 0.3
    inversion_steps: int = 50
    inversion_order: int = 2
    inversion_r: float = 0.5
    checkpoint_every: int = 0

    def validate(self) -> "TrainRecipe":
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        need = REQUIRED_COUPLING[self.algorithm]
        if self.coupling != need:
            raise ConfigError(f"{self.algorithm} requires coupling={need}, got coupling={self.coupling}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.init not in ("pretrained", "from_scratch"):
            raise ConfigError(f"init must be 'pretrained' or 'from_scratch', got {self.init!r}")
        return self

    def digest(self) -> str:
        return hashlib.sha256(repr(sorted(asdict(self).items())).encode()).hexdigest()[:12]


@dataclass
class TrainResult:
    net: VectorFieldNet
    losses: list[float]
    lrs: list[float]
    flags: list[str] = field(default_factory=list)

    def tail_loss(self, frac: float = 0.1) -> float:
        k = max(1, int(round(len(self.losses) * frac)))
        return float(np.mean(self.losses[-k:]))

    def loss_rows(self):
        return [(i, loss, lr, "") for i, (loss, lr) in enumerate(zip(self.losses, self.lrs))]


LOSS_HEADER = ("step", "loss", "lr", "notes")


def _fit(net: VectorFieldNet, recipe: TrainRecipe, steps: int, batch_fn: Callable,
         checkpoint_fn: Callable | None = None) -> TrainResult:
    """Shared optimisation loop; ``batch_fn(step)`` returns (state, t, target, weight)."""
    state = OptimizerState.for_params(net.params, recipe.beta1, recipe.beta2, recipe.eps, recipe.weight_decay)
    names = net.param_names
    losses, lrs = [], []
    for step in range(steps):
        x, t, target, weight = batch_fn(step)
        try:
            loss, grads = _sq_loss(net, x, t, target, weight)
        except DivergenceError as exc:
            raise DivergenceError(f"training diverged at step {step}: {exc}") from exc
        lr = lr_schedule(recipe.lr_schedule, step, steps, recipe.lr)
        if lr > 0:
            net = net.with_params(adamw_step(state, net.params, grads, lr, names))
        losses.append(loss)
        lrs.append(lr)
        if checkpoint_fn and recipe.checkpoint_every and (step + 1) % recipe.checkpoint_every == 0:
            checkpoint_fn(net, step + 1)
    return TrainResult(net, losses, lrs)


def train(recipe: TrainRecipe, dataset, net: VectorFieldNet, *, pretrained: VectorFieldNet | None = None,
          cache: InversionCache | None = None, checkpoint_fn: Callable | None = None) -> TrainResult:
    """Run one of alg1/alg2/alg3 on ``dataset`` starting from ``net``.

    ``pretrained`` is the frozen field used for target inversion (alg1 with rho > 0);
    inverted targets are computed once per pair and cached.
    """
    recipe.validate()
    if recipe.algorithm == "conventional_baseline":
        raise ConfigError("use train_conventional_baseline for the conventional arm")
    if net.state_dim != dataset.x0.shape[1]:
        raise ShapeError(f"network width {net.state_dim} != chunk dim {dataset.x0.shape[1]}")
    flags = []
    if recipe.algorithm == "alg1_oc_ti" and recipe.init == "from_scratch":
        flags.append("alg1_from_scratch")
        log.warning("alg1 started from scratch: the ablation configuration, not the method")

    use_ti = recipe.algorithm == "alg1_oc_ti" and recipe.rho > 0
    x1_hat = None
    if use_ti:
        if pretrained is None:
            raise ConfigError("target inversion needs the frozen pretrained network")
        cache = cache or InversionCache()
        x1_hat = cache.invert_all(pretrained, dataset.x1, dataset.labels, recipe.inversion_steps,
                                  recipe.inversion_order, recipe.inversion_r)

    codec = LatentCodec(sigma0=recipe.sigma0)
    strategy = CouplingStrategy(recipe.coupling, recipe.batch_size)
    batch_rng = make_rng(recipe.seed, "train", "batch")
    time_rng = make_rng(recipe.seed, "train", "time")
    ti_rng = make_rng(recipe.seed, "train", "ti")

    def batch_fn(step):
        batch = draw_coupled_batch(strategy, dataset, batch_rng, recipe.batch_size)
        mu1, _ = codec.encode(batch.x1)
        mu0, sigma0 = codec.encode(batch.x0)
        x0 = mu0
        if use_ti:
            x0 = apply_target_inversion(mu0, sigma0, x1_hat[batch.tgt_index], recipe.rho, ti_rng)
        t = recipe.timestep.sample(time_rng, len(batch))
        return interpolate(x0, mu1, t), t, mu1 - x0, None

    result = _fit(net, recipe, recipe.steps, batch_fn, checkpoint_fn)
    result.flags = flags
    return result


def pretrain_noise_to_data(dataset, hidden: Sequence[int] = (256, 256), time_width: int = 16, steps: int = 2000,
                           seed: int = 0, *, recipe: TrainRecipe | None = None, net: VectorFieldNet | None = None,
                           checkpoint_fn: Callable | None = None) -> TrainResult:
    """Standard flow matching from N(0, I) to the succeeding-chunk pool."""
    recipe = recipe or TrainRecipe(algorithm="alg3_oc_only", steps=steps, seed=seed)
    data = dataset.x1 if hasattr(dataset, "x1") else np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    d = data.shape[1]
    if net is None:
        net = VectorFieldNet.init(d, hidden, time_width, make_rng(seed, "pretrain", "init"))
    batch_rng = make_rng(seed, "pretrain", "batch")
    noise_rng = make_rng(seed, "pretrain", "noise")
    time_rng = make_rng(seed, "pretrain", "time")

    def batch_fn(step):
        idx = batch_rng.integers(0, data.shape[0], size=recipe.batch_size)
        x1 = data[idx]
        x0 = noise_rng.standard_normal(x1.shape)
        t = recipe.timestep.sample(time_rng, recipe.batch_size)
        return interpolate(x0, x1, t), t, x1 - x0, None

    return _fit(net, recipe, steps, batch_fn, checkpoint_fn)


def train_conventional_baseline(dataset, hidden: Sequence[int] = (256, 256), time_width: int = 16,
                                steps: int = 2000, seed: int = 0, *, recipe: TrainRecipe | None = None,
                                net: VectorFieldNet | None = None, checkpoint_fn: Callable | None = None) -> TrainResult:
    """Condition-plus-noise arm: state = [x0 | x_t], output covers both halves,
    loss only on the target half's velocity x1 - eps."""
    recipe = recipe or TrainRecipe(algorithm="conventional_baseline", steps=steps, seed=seed)
    d = dataset.x0.shape[1]
    if net is None:
        net = VectorFieldNet.init(2 * d, hidden, time_width, make_rng(seed, "baseline", "init"))
    if net.state_dim != 2 * d or net.out_dim != 2 * d:
        raise ShapeError(f"conventional net must map 2d -> 2d (d={d}), has widths {net.widths}")
    batch_rng = make_rng(seed, "baseline", "batch")
    noise_rng = make_rng(seed, "baseline", "noise")
    time_rng = make_rng(seed, "baseline", "time")
    weight = np.concatenate([np.zeros(d), np.ones(d)])
    strategy = CouplingStrategy("inherent", recipe.batch_size)

    def batch_fn(step):
        batch = draw_coupled_batch(strategy, dataset, batch_rng, recipe.batch_size)
        eps = noise_rng.standard_normal(batch.x1.shape)
        t = recipe.timestep.sample(time_rng, len(batch))
        state = np.concatenate([batch.x0, interpolate(eps, batch.x1, t)], axis=1)
        target = np.concatenate([np.zeros_like(batch.x0), batch.x1 - eps], axis=1)
        return state, t, target, weight

    return _fit(net, recipe, steps, batch_fn, checkpoint_fn)
