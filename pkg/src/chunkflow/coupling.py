"""Training-pair couplings and an exact discrete OT solver with masks.

With uniform marginals the transport LP over the scaled Birkhoff polytope is
optimised at a vertex, i.e. a permutation matrix divided by n, so the exact
plan comes from a linear assignment solve.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fileio
from .errors import ConfigError, InfeasibleError, ShapeError

SOLVER_CAP = 512
DEFAULT_PENALTY_FACTOR = 1e6
MASK_KINDS = ("none", "no_self", "next_only")
COUPLING_KINDS = ("independent", "inherent", "minibatch_ot")

Label = tuple[int, int]


@dataclass
class CostMatrix:
    M: np.ndarray
    row_labels: list | None = None
    col_labels: list | None = None

    @property
    def n(self) -> int:
        return self.M.shape[0]


@dataclass
class TransportPlan:
    plan: np.ndarray                # (n, n), rows sum to 1/n, cols sum to 1/n
    mask: np.ndarray                # (n, n) bool, True = allowed
    objective: float                # sum of M * plan over allowed entries
    assignment: np.ndarray          # row i -> column assignment[i]
    n_penalized: int = 0            # matches forced onto forbidden entries
    fallback: bool = False

    @property
    def n(self) -> int:
        return self.plan.shape[0]


@dataclass
class CouplingStrategy:
    kind: str = "inherent"
    batch_size: int = 32

    def __post_init__(self):
        if self.kind not in COUPLING_KINDS:
            raise ConfigError(f"unknown coupling {self.kind!r}; expected one of {COUPLING_KINDS}")


def _flatten_all(chunks) -> np.ndarray:
    arrs = [np.asarray(c, dtype=np.float64).ravel() for c in chunks]
    if not arrs:
        raise ShapeError("cost matrix needs at least one chunk")
    dims = {a.size for a in arrs}
    if len(dims) != 1:
        raise ShapeError(f"chunks have mixed dimensionalities {sorted(dims)}")
    return np.stack(arrs)


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances by direct differencing, row by row (exact zeros on duplicates)."""
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        diff = b - a[i]
        out[i] = np.einsum("ij,ij->i", diff, diff)
    return out


def cost_matrix(chunks, labels=None) -> CostMatrix:
    x = _flatten_all(chunks)
    return CostMatrix(pairwise_sq_dists(x, x), labels, labels)


def cross_cost(sources, targets, row_labels=None, col_labels=None) -> CostMatrix:
    a, b = _flatten_all(sources), _flatten_all(targets)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"source dim {a.shape[1]} != target dim {b.shape[1]}")
    return CostMatrix(pairwise_sq_dists(a, b), row_labels, col_labels)


def make_mask(labels: Sequence[Label], kind: str = "none", col_labels: Sequence[Label] | None = None) -> np.ndarray:
    rows = [tuple(l) for l in labels]
    cols = rows if col_labels is None else [tuple(l) for l in col_labels]
    if kind == "none":
        return np.ones((len(rows), len(cols)), dtype=bool)
    if kind == "no_self":
        return np.array([[r != c for c in cols] for r in rows], dtype=bool).reshape(len(rows), len(cols))
    if kind == "next_only":
        return np.array([[c[1] == r[1] + 1 for c in cols] for r in rows], dtype=bool).reshape(len(rows), len(cols))
    raise ConfigError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}")


def linear_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect assignment of a square matrix (shortest augmenting paths, O(n^3)).

    Returns ``col`` with row i assigned to column ``col[i]``. Ties go to the lowest
    column index because every scan takes the first minimiser.
    """
    c = np.asarray(cost, dtype=np.float64)
    n = c.shape[0]
    if c.ndim != 2 or c.shape[1] != n:
        raise ShapeError(f"assignment needs a square matrix, got {c.shape}")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    # 1-indexed potentials and matching; index 0 is the virtual source column
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)   # match[j] = row assigned to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[match[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    col = np.empty(n, dtype=np.int64)
    col[match[1:] - 1] = np.arange(n)
    return col


def solve_ot_exact(M, mask=None, *, fallback: bool = False,
                   penalty_factor: float = DEFAULT_PENALTY_FACTOR, cap: int = SOLVER_CAP) -> TransportPlan:
    """Exact uniform-marginal OT plan under an optional feasibility mask.

    Forbidden entries are priced at ``penalty_factor`` times the largest finite cost.
    Without ``fallback`` any forced use of a forbidden entry raises
    :class:`InfeasibleError`; with it, such matches are kept and counted in
    ``n_penalized`` and excluded from ``objective``.
    """
    cost = np.asarray(M.M if isinstance(M, CostMatrix) else M, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n) or n == 0:
        raise ShapeError(f"cost matrix must be square and non-empty, got {cost.shape}")
    if n > cap:
        raise ConfigError(f"n={n} exceeds the solver cap {cap}")
    if not np.all(np.isfinite(cost)):
        raise ShapeError("cost matrix has non-finite entries")
    mask = np.ones((n, n), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != (n, n):
        raise ShapeError(f"mask shape {mask.shape} != cost shape {cost.shape}")

    base = float(cost.max())
    if base <= 0.0:
        base = 1.0
    # a forbidden entry must outweigh any all-allowed permutation (total <= n * base)
    factor = penalty_factor if fallback else max(penalty_factor, 2.0 * n)
    priced = np.where(mask, cost, factor * base)
    col = linear_assignment(priced)
    rows = np.arange(n)
    bad = ~mask[rows, col]
    if bad.any() and not fallback:
        unmatched = [int(r) for r in rows[bad]]
        raise InfeasibleError(f"mask admits no perfect matching; unmatched rows {unmatched}", unmatched)
    plan = np.zeros((n, n))
    plan[rows, col] = 1.0 / n
    objective = float(np.sum(cost[rows, col][~bad]) / n)
    return TransportPlan(plan, mask, objective, col, int(bad.sum()), fallback)


def adjacency_mass(plan: TransportPlan, labels: Sequence[Label], col_labels: Sequence[Label] | None = None) -> float:
    """Plan mass on entries whose column is the same-video immediate successor of the row."""
    rows = [tuple(l) for l in labels]
    cols = rows if col_labels is None else [tuple(l) for l in col_labels]
    succ = np.array([[c[0] == r[0] and c[1] == r[1] + 1 for c in cols] for r in rows], dtype=bool)
    return float(plan.plan[succ].sum())


def export_plan(plan: TransportPlan, stem, labels: Sequence[Label] | None = None) -> list[Path]:
    """Text matrix dump, PGM heatmap (max mass maps to white) and video-boundary sidecar."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    txt = stem.with_suffix(".plan.txt")
    txt.write_text("\n".join(" ".join(fileio.fmt(v) for v in row) for row in plan.plan) + "\n")
    peak = plan.plan.max()
    out = [txt, fileio.save_pgm(stem.with_suffix(".plan.pgm"), plan.plan / peak if peak > 0 else plan.plan)]
    if labels is not None:
        ticks = [i for i in range(1, len(labels)) if labels[i][0] != labels[i - 1][0]]
        side = stem.with_suffix(".boundaries.txt")
        side.write_text("".join(f"{i}\n" for i in ticks))
        out.append(side)
    return out


# ---------------------------------------------------------------------------
# batch couplings


@dataclass
class CoupledBatch:
    x0: np.ndarray              # (B, d)
    x1: np.ndarray              # (B, d)
    src_index: np.ndarray       # dataset rows providing x0
    tgt_index: np.ndarray       # dataset rows providing x1
    with_replacement: bool = False

    def __len__(self) -> int:
        return self.x0.shape[0]


def draw_coupled_batch(strategy: CouplingStrategy | str, dataset, rng, batch_size: int | None = None) -> CoupledBatch:
    """Sample a batch of (x0, x1) pairs from ``dataset`` (anything with ``x0``/``x1`` row arrays)."""
    if isinstance(strategy, str):
        strategy = CouplingStrategy(strategy, batch_size or 32)
    b = batch_size or strategy.batch_size
    n = dataset.x0.shape[0]
    if n == 0:
        raise ConfigError("cannot draw a batch from an empty dataset")
    if strategy.kind == "inherent":
        replace = b > n
        idx = rng.choice(n, size=b, replace=replace)
        return CoupledBatch(dataset.x0[idx], dataset.x1[idx], idx, idx.copy(), replace)
    if strategy.kind == "independent":
        i0 = rng.integers(0, n, size=b)
        i1 = rng.integers(0, n, size=b)
        return CoupledBatch(dataset.x0[i0], dataset.x1[i1], i0, i1, True)
    # minibatch OT: two independent draws, then re-pair by the exact plan
    replace = b > n
    i0 = rng.choice(n, size=b, replace=replace)
    i1 = rng.choice(n, size=b, replace=replace)
    plan = solve_ot_exact(cross_cost(dataset.x0[i0], dataset.x1[i1]).M)
    i1 = i1[plan.assignment]
    return CoupledBatch(dataset.x0[i0], dataset.x1[i1], i0, i1, replace)
