"""Desk-scale evaluation: path straightness, endpoint error, exact empirical W2,
seam smoothness, centroid-track continuity, NFE sweeps and the activation-cost
scaling regression."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import fileio
from .coupling import cross_cost, solve_ot_exact
from .datagen import blob_centroid
from .errors import DegenerateInputError, ShapeError
from .flow import LatentCodec, rollout, sample_continuation


@dataclass
class TrajectoryRecord:
    states: list
    t_grid: np.ndarray

    def __post_init__(self):
        if len(self.states) != len(self.t_grid):
            raise ShapeError(f"{len(self.states)} states for {len(self.t_grid)} grid points")


@dataclass
class EvalReport:
    metrics: dict[str, float]
    config_hash: str = ""
    n_samples: int = 0

    def __post_init__(self):
        bad = [k for k, v in self.metrics.items() if not math.isfinite(v)]
        if bad:
            raise DegenerateInputError(f"non-finite metrics: {bad}")
        if self.n_samples <= 0:
            raise DegenerateInputError("an evaluation report needs at least one sample")


@dataclass
class ScalingFit:
    points: list[tuple[float, float]]
    k: float
    b: float
    residual_norm: float


def path_curvature(traj) -> float:
    """Polyline length over chord length, minus one (0 when the chord is < 1e-12)."""
    states = traj.states if isinstance(traj, TrajectoryRecord) else traj
    xs = np.stack([np.ravel(s) for s in states])
    if xs.shape[0] < 2:
        raise DegenerateInputError("curvature needs at least two states")
    chord = float(np.linalg.norm(xs[-1] - xs[0]))
    if chord < 1e-12:
        return 0.0
    length = float(np.sum(np.linalg.norm(np.diff(xs, axis=0), axis=1)))
    return max(length / chord - 1.0, 0.0)


def endpoint_mse(generated, ground_truth) -> float:
    g = np.asarray(generated, dtype=np.float64)
    y = np.asarray(ground_truth, dtype=np.float64)
    if g.shape != y.shape:
        raise ShapeError(f"endpoint_mse: {g.shape} vs {y.shape}")
    return float(np.mean((g - y) ** 2))


def batch_w2(set_a, set_b) -> float:
    """Exact empirical 2-Wasserstein distance between two equal-size point clouds."""
    a = np.stack([np.ravel(x) for x in set_a])
    b = np.stack([np.ravel(x) for x in set_b])
    if a.shape != b.shape:
        raise ShapeError(f"batch_w2 needs equal counts and dims, got {a.shape} vs {b.shape}")
    plan = solve_ot_exact(cross_cost(a, b).M)
    return math.sqrt(max(plan.objective, 0.0))


def _frames(chunk, frame_shape=None) -> np.ndarray:
    c = np.asarray(chunk, dtype=np.float64)
    if frame_shape is not None:
        c = c.reshape(-1, *frame_shape)
    if c.ndim != 3:
        raise ShapeError(f"expected a (frames, H, W) chunk, got {c.shape}")
    return c


def seam_metrics(x0_chunk, generated_chunk, frame_shape=None) -> tuple[float, float]:
    """Jump and second-difference energy across the input/output boundary.

    jump  = mean((g_1 - x_L)^2)
    accel = mean(((g_1 - x_L) - (x_L - x_{L-1}))^2)
    """
    x = _frames(x0_chunk, frame_shape)
    g = _frames(generated_chunk, frame_shape)
    if x.shape[0] < 2 or g.shape[0] < 1:
        raise DegenerateInputError("seam metrics need >= 2 input frames and >= 1 generated frame")
    if x.shape[1:] != g.shape[1:]:
        raise ShapeError(f"frame shapes differ: {x.shape[1:]} vs {g.shape[1:]}")
    step_in = x[-1] - x[-2]
    step_out = g[0] - x[-1]
    return float(np.mean(step_out ** 2)), float(np.mean((step_out - step_in) ** 2))


def motion_continuity(x0_chunk, generated_chunk, frame_shape=None) -> float:
    """Mean squared second difference of the blob-centroid track, evaluated at the
    last input frame and at every generated frame that has a successor.

    Generated frames are clipped to [0, 1] before centroid extraction.
    """
    x = _frames(x0_chunk, frame_shape)
    g = np.clip(_frames(generated_chunk, frame_shape), 0.0, 1.0)
    if x.shape[0] < 2:
        raise DegenerateInputError("motion continuity needs >= 2 input frames")
    track = np.array([blob_centroid(f) for f in np.concatenate([x, g])])
    L = x.shape[0]
    second = track[L - 2: -2] - 2.0 * track[L - 1: -1] + track[L:]
    return float(np.mean(np.sum(second ** 2, axis=1)))


NFE_SWEEP_HEADER = ("nfe", "endpoint_mse", "w2", "curvature", "seam_jump", "seam_accel")


def evaluate_continuations(net, x0_rows, x1_rows, chunk_shape, nfe: int, codec: LatentCodec | None = None,
                           w2_cap: int = 128) -> dict[str, float]:
    gen, states, _ = sample_continuation(net, x0_rows, nfe, codec, return_trajectory=True)
    per_state = np.stack(states, axis=1)  # (N, nfe + 1, d)
    curv = [path_curvature(list(per_state[i])) for i in range(per_state.shape[0])]
    seams = [seam_metrics(x0_rows[i], gen[i], chunk_shape[1:]) for i in range(gen.shape[0])]
    n_w2 = min(gen.shape[0], w2_cap)
    return {
        "endpoint_mse": endpoint_mse(gen, x1_rows),
        "w2": batch_w2(gen[:n_w2], x1_rows[:n_w2]),
        "curvature": float(np.mean(curv)),
        "seam_jump": float(np.mean([s[0] for s in seams])),
        "seam_accel": float(np.mean([s[1] for s in seams])),
    }


def nfe_sweep(net, eval_set, nfe_list: Sequence[int], codec: LatentCodec | None = None, csv_path=None,
              config_hash: str = "") -> list[EvalReport]:
    """Continuation metrics over ``eval_set`` (a ChunkDataset) for each NFE."""
    if not nfe_list:
        raise DegenerateInputError("nfe_list is empty")
    if len(eval_set) == 0:
        raise DegenerateInputError("evaluation set is empty")
    reports = []
    for nfe in nfe_list:
        m = evaluate_continuations(net, eval_set.x0, eval_set.x1, eval_set.chunk_shape, int(nfe), codec)
        reports.append(EvalReport({"nfe": float(nfe), **m}, config_hash, len(eval_set)))
    if csv_path is not None:
        fileio.write_csv(csv_path, NFE_SWEEP_HEADER,
                         [[int(r.metrics["nfe"])] + [r.metrics[k] for k in NFE_SWEEP_HEADER[1:]] for r in reports])
    return reports


ROLLOUT_HEADER = ("video_id", "start_chunk", "chunk", "endpoint_mse")


def rollout_errors(net, frames, chunk_length: int, n_chunks: int, nfe: int, start_chunk: int = 0,
                   codec: LatentCodec | None = None) -> list[float]:
    """Per-chunk MSE of an autoregressive rollout against the video's own later chunks.

    The rollout starts from chunk ``start_chunk`` (frames ``[s L, (s + 1) L)``) and
    chunk k of the rollout is compared with frames ``[(s + k) L, (s + k + 1) L)``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    L = chunk_length
    first = start_chunk * L
    if first + (n_chunks + 1) * L > frames.shape[0]:
        raise DegenerateInputError(
            f"video of {frames.shape[0]} frames is too short for {n_chunks} chunks from chunk {start_chunk}")
    gen = rollout(net, frames[first:first + L].ravel(), n_chunks, nfe, codec)
    return [endpoint_mse(g, frames[first + k * L: first + (k + 1) * L].ravel())
            for k, g in enumerate(gen, start=1)]


PER_CATEGORY_HEADER = ("motion_class", "camera_class", "n_pairs", "endpoint_mse", "seam_jump", "seam_accel",
                       "motion_continuity")


def per_category(net, dataset, nfe: int, motion_classes: Sequence[str], camera_classes: Sequence[str],
                 codec: LatentCodec | None = None) -> list[tuple]:
    """One row per (motion, camera) cell in grid order; empty cells report zero pairs and blank metrics."""
    rows = []
    L, H, W = dataset.chunk_shape
    for motion in motion_classes:
        for camera in camera_classes:
            cell = dataset.select(motion, camera)
            if len(cell) == 0:
                rows.append((motion, camera, 0, "", "", "", ""))
                continue
            gen = sample_continuation(net, cell.x0, nfe, codec)
            seams = [seam_metrics(cell.x0[i], gen[i], (H, W)) for i in range(len(cell))]
            cont = [motion_continuity(cell.x0[i], gen[i], (H, W)) for i in range(len(cell))]
            rows.append((motion, camera, len(cell), endpoint_mse(gen, cell.x1),
                         float(np.median([s[0] for s in seams])), float(np.median([s[1] for s in seams])),
                         float(np.median(cont))))
    return rows


# ---------------------------------------------------------------------------
# memory-scaling proxy


def activation_cost(widths: Sequence[int], d_in: int | None = None) -> int:
    """Activation units for one forward pass at batch 1: input width plus every layer's output width.

    ``d_in`` replaces ``widths[0]`` when given.
    """
    widths = list(widths)
    if d_in is not None:
        widths[0] = int(d_in)
    if any(w <= 0 for w in widths):
        raise ShapeError(f"widths must be positive, got {widths}")
    return int(sum(widths))


def direct_widths(d: int, hidden: Sequence[int], time_width: int) -> list[int]:
    return [d + time_width, *hidden, d]


def conventional_widths(d: int, hidden: Sequence[int], time_width: int) -> list[int]:
    return [2 * d + time_width, *hidden, 2 * d]


def ols_fit(points: Sequence[tuple[float, float]], scale: float = 1e6) -> ScalingFit:
    """Least-squares line cost = k * (V / scale) + b."""
    pts = [(float(v), float(c)) for v, c in points]
    x = np.array([v / scale for v, _ in pts])
    y = np.array([c for _, c in pts])
    if len(pts) < 2 or np.ptp(x) == 0:
        raise DegenerateInputError("OLS needs at least two distinct V values")
    xm, ym = x.mean(), y.mean()
    k = float(np.sum((x - xm) * (y - ym)) / np.sum((x - xm) ** 2))
    b = float(ym - k * xm)
    resid = y - (k * x + b)
    return ScalingFit(pts, k, b, float(np.linalg.norm(resid)))


def scaling_comparison(volumes: Sequence[int], hidden: Sequence[int], time_width: int) -> tuple[ScalingFit, ScalingFit]:
    """OLS fits of activation cost against effective volume V = d for both input designs."""
    direct = ols_fit([(v, activation_cost(direct_widths(v, hidden, time_width))) for v in volumes])
    conv = ols_fit([(v, activation_cost(conventional_widths(v, hidden, time_width))) for v in volumes])
    return direct, conv


def report_hash(report_text: str) -> str:
    return hashlib.sha256(report_text.encode()).hexdigest()[:16]
