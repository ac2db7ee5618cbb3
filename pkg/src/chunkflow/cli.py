"""Command line entry point.

Every command reads a config file, creates a fresh run directory under
``--out`` and finishes by writing the run's artifact manifest. Exit codes:
0 success, 1 other failure, 2 config or input error, 3 numeric divergence,
4 infeasible transport mask.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import fileio, metrics, rundir
from .coupling import (
    SOLVER_CAP, adjacency_mass, cost_matrix, export_plan, make_mask, solve_ot_exact,
)
from .datagen import (
    MOTION_CLASSES, CAMERA_CLASSES, build_dataset, build_videos, read_dataset, split_chunks,
    write_dataset,
)
from .errors import ChunkflowError, ConfigError, DegenerateInputError
from .flow import (
    LOSS_HEADER, InversionCache, TimestepSampler, TrainRecipe, euler_integrate,
    invert_target, load_checkpoint, pretrain_noise_to_data, rollout, sample_conventional,
    save_checkpoint, train, train_conventional_baseline,
)
from .numerics import VectorFieldNet, make_rng

log = logging.getLogger("chunkflow")

COMMANDS = ("gen-data", "pretrain", "finetune", "sample", "invert", "otplan", "evaluate", "memfit", "verify")


# ---------------------------------------------------------------------------
# shared plumbing


def recipe_from_config(cfg: cfgmod.Config, seed: int) -> TrainRecipe:
    tr = cfg["train"]
    sampler = TimestepSampler(tr["timestep"], tr["logit_loc"], tr["logit_scale"], tr["shift"])
    return TrainRecipe(
        algorithm=tr["algorithm"], coupling=tr["coupling"], rho=tr["rho"], steps=tr["steps"],
        batch_size=tr["batch_size"], lr=tr["lr"], lr_schedule=tr["lr_schedule"], beta1=tr["beta1"],
        beta2=tr["beta2"], eps=tr["eps"], weight_decay=tr["weight_decay"], seed=seed, init=tr["init"],
        timestep=sampler, sigma0=tr["sigma0"], inversion_steps=tr["inversion_steps"],
        inversion_order=tr["inversion_order"], inversion_r=tr["inversion_r"],
        checkpoint_every=tr["checkpoint_every"],
    )


def _manifest_path(data, split: str) -> Path:
    if not data:
        raise ConfigError("no dataset given: set data.dataset or pass --data")
    p = Path(data)
    if p.is_file():
        return p
    for cand in (p / split / "manifest.tsv", p / "manifest.tsv"):
        if cand.exists():
            return cand
    raise ConfigError(f"no {split} manifest under {p}")


def load_split(args, cfg, split: str):
    ds = read_dataset(_manifest_path(args.data or cfg["data"]["dataset"], split))
    if len(ds) == 0:
        raise DegenerateInputError(f"{split} split is empty")
    return ds


def _checkpoint_path(path) -> Path:
    p = Path(path)
    return p if p.suffix == ".fc2s" else p.with_suffix(".fc2s")


def _save_loss_csv(run, result) -> None:
    fileio.write_csv(run / "loss.csv", LOSS_HEADER,
                     [(i, loss, lr, ";".join(result.flags) if i == 0 else "")
                      for i, (loss, lr) in enumerate(zip(result.losses, result.lrs))])


def _ckpt_saver(run, kind: str, recipe_hash: str):
    def save(net, step):
        save_checkpoint(net, run / f"checkpoints/step{step:06d}", step=step, recipe_hash=recipe_hash, kind=kind)
    return save


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg, run, seed) -> None:
    d = cfg["data"]
    for name in d["motion_classes"]:
        if name not in MOTION_CLASSES:
            raise ConfigError(f"unknown motion class {name!r}; expected one of {MOTION_CLASSES}")
    for name in d["camera_classes"]:
        if name not in CAMERA_CLASSES:
            raise ConfigError(f"unknown camera class {name!r}; expected one of {CAMERA_CLASSES}")
    sigma = d["blob_sigma"] or None
    grid = (d["motion_classes"], d["camera_classes"])
    n_train = d["train_per_cell"] * len(grid[0]) * len(grid[1])
    splits = {
        "train": build_videos(seed, d["frames"], d["height"], d["width"], d["train_per_cell"], *grid,
                              first_id=0, sigma=sigma),
        "eval": build_videos(seed, d["frames"], d["height"], d["width"], d["eval_per_cell"], *grid,
                             first_id=n_train, sigma=sigma),
    }
    rows = []
    for name, videos in splits.items():
        if not videos:
            continue
        ds = build_dataset(videos, d["chunk_length"], d["scene_bins"], d["scene_threshold"])
        write_dataset(run / name, ds)
        rows.append((name, len(videos), len(ds)))
    fileio.write_csv(run / "summary.csv", ("split", "videos", "pairs"), rows)


def _init_net(cfg, d_state: int, seed: int, stream: str) -> VectorFieldNet:
    m = cfg["model"]
    return VectorFieldNet.init(d_state, m["hidden"], m["time_width"], make_rng(seed, stream, "init"),
                               out_scale=m["out_scale"])


def cmd_pretrain(args, cfg, run, seed) -> None:
    recipe = recipe_from_config(cfg, seed)
    recipe.algorithm, recipe.coupling = "alg3_oc_only", "inherent"
    recipe.steps = cfg["train"]["pretrain_steps"]
    recipe.validate()
    ds = load_split(args, cfg, "train")
    net = _init_net(cfg, ds.dim, seed, "pretrain")
    save_checkpoint(net, run / "checkpoints/step000000", step=0, recipe_hash=recipe.digest(), kind="direct")
    result = pretrain_noise_to_data(ds, steps=recipe.steps, seed=seed, recipe=recipe, net=net,
                                    checkpoint_fn=_ckpt_saver(run, "direct", recipe.digest()))
    if recipe.steps > 0:
        save_checkpoint(result.net, run / "checkpoints/final", step=recipe.steps, recipe_hash=recipe.digest(),
                        kind="direct")
    _save_loss_csv(run, result)


def cmd_finetune(args, cfg, run, seed) -> None:
    recipe = recipe_from_config(cfg, seed).validate()
    pre_path = args.pretrained or cfg["train"]["pretrained"]
    conventional = recipe.algorithm == "conventional_baseline"
    use_ti = recipe.algorithm == "alg1_oc_ti" and recipe.rho > 0
    needs_pre = not conventional and (recipe.init == "pretrained" or use_ti)
    if needs_pre and not pre_path:
        raise ConfigError(f"{recipe.algorithm} with init={recipe.init} needs a pretrained checkpoint "
                          "(train.pretrained or --pretrained)")
    pretrained = load_checkpoint(_checkpoint_path(pre_path))[0] if needs_pre else None
    ds = load_split(args, cfg, "train")
    kind = "conventional" if conventional else "direct"
    if conventional:
        net = _init_net(cfg, 2 * ds.dim, seed, "baseline")
    elif recipe.init == "pretrained":
        net = pretrained.copy()
    else:
        net = _init_net(cfg, ds.dim, seed, "finetune")
    save_checkpoint(net, run / "checkpoints/step000000", step=0, recipe_hash=recipe.digest(), kind=kind)
    saver = _ckpt_saver(run, kind, recipe.digest())
    if conventional:
        result = train_conventional_baseline(ds, steps=recipe.steps, seed=seed, recipe=recipe, net=net,
                                             checkpoint_fn=saver)
    else:
        result = train(recipe, ds, net, pretrained=pretrained, cache=InversionCache(), checkpoint_fn=saver)
    if recipe.steps > 0:
        save_checkpoint(result.net, run / "checkpoints/final", step=recipe.steps, recipe_hash=recipe.digest(),
                        kind=kind)
    _save_loss_csv(run, result)


def _one_checkpoint(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    return load_checkpoint(_checkpoint_path(args.checkpoint[0]))


def cmd_sample(args, cfg, run, seed) -> None:
    net, meta = _one_checkpoint(args)
    s = cfg["sample"]
    nfe = args.nfe if args.nfe is not None else s["nfe"]
    n_chunks = args.n_chunks if args.n_chunks is not None else s["n_chunks"]
    chunk_id = args.chunk_id if args.chunk_id is not None else s["chunk_id"]
    ds = load_split(args, cfg, "eval")
    if not 0 <= chunk_id < len(ds):
        raise ConfigError(f"chunk id {chunk_id} outside the eval split (0..{len(ds) - 1})")
    shape = ds.chunk_shape
    x0 = ds.x0[chunk_id]
    if meta.get("kind") == "conventional":
        rng = make_rng(seed, "sample", "noise")
        cur, chunks = x0, []
        for _ in range(n_chunks):
            cur = sample_conventional(net, cur, nfe, rng)[0]
            chunks.append(cur)
        states = None
    else:
        _, states, grid = euler_integrate(net, x0[None], nfe, record=True)
        chunks = rollout(net, x0, n_chunks, nfe)
    for k, chunk in enumerate(chunks, start=1):
        frames = chunk.reshape(shape)
        fileio.save_tensor(run / f"chunks/chunk{k:03d}.fc2s", frames)
        for f in range(shape[0]):
            fileio.save_pgm(run / f"frames/chunk{k:03d}_frame{f:03d}.pgm", frames[f])
    rows = []
    if states is not None:
        fileio.save_tensor(run / "trajectory.fc2s", np.stack([st[0] for st in states]))
        fileio.save_tensor(run / "trajectory_t.fc2s", grid)
    jump, accel = metrics.seam_metrics(x0, chunks[0], shape[1:])
    rows.append((chunk_id, nfe, n_chunks, metrics.endpoint_mse(chunks[0], ds.x1[chunk_id]), jump, accel,
                 metrics.path_curvature(states) if states is not None else ""))
    fileio.write_csv(run / "sample.csv",
                     ("chunk_id", "nfe", "n_chunks", "endpoint_mse", "seam_jump", "seam_accel", "curvature"), rows)


def cmd_invert(args, cfg, run, seed) -> None:
    net, _ = _one_checkpoint(args)
    tr = cfg["train"]
    ds = load_split(args, cfg, "eval")
    n = min(len(ds), cfg["eval"]["max_eval"])
    x1 = ds.x1[:n]
    inv = invert_target(net, x1, tr["inversion_steps"], tr["inversion_order"], tr["inversion_r"])
    back = euler_integrate(net, inv, tr["inversion_steps"])
    rel = np.linalg.norm(back - x1, axis=1) / np.maximum(np.linalg.norm(x1, axis=1), 1e-12)
    fileio.save_tensor(run / "inverted.fc2s", inv)
    fileio.write_csv(run / "roundtrip.csv", ("video_id", "chunk_index", "relative_error"),
                     [(int(ds.video_ids[i]), int(ds.chunk_index[i]), float(rel[i])) for i in range(n)])


def ot_batch(ds, n_videos: int, chunk_length: int):
    """Consecutive chunks of the first ``n_videos`` source videos with (video, chunk) labels."""
    vids = sorted(ds.videos)[:n_videos]
    if not vids:
        raise DegenerateInputError("the dataset carries no source videos for an OT batch")
    chunks, labels = [], []
    for vid in vids:
        for idx, chunk in split_chunks(ds.videos[vid], chunk_length):
            chunks.append(chunk)
            labels.append((vid, idx))
    return chunks, labels


OTPLAN_HEADER = ("n", "mask", "objective", "adjacency_mass", "control_adjacency_mass", "n_penalized")


def cmd_otplan(args, cfg, run, seed) -> None:
    e = cfg["eval"]
    ds = load_split(args, cfg, "train")
    L = e["ot_chunk_length"] or cfg["data"]["chunk_length"]
    chunks, labels = ot_batch(ds, e["ot_videos"], L)
    if len(chunks) > SOLVER_CAP:
        raise ConfigError(f"OT batch of {len(chunks)} chunks exceeds the solver cap {SOLVER_CAP}")
    M = cost_matrix(chunks, labels)
    plan = solve_ot_exact(M, make_mask(labels, e["mask"]), fallback=e["ot_fallback"], penalty_factor=e["ot_penalty"])
    perm = make_rng(seed, "otplan", "control").permutation(len(labels))
    control = [labels[i] for i in perm]
    export_plan(plan, run / "plan", labels)
    fileio.write_csv(run / "otplan.csv", OTPLAN_HEADER,
                     [(plan.n, e["mask"], plan.objective, adjacency_mass(plan, labels),
                       adjacency_mass(plan, control), plan.n_penalized)])


def cmd_evaluate(args, cfg, run, seed) -> None:
    if not args.checkpoint or len(args.checkpoint) > 2:
        raise ConfigError("evaluate takes one direct checkpoint, optionally followed by a conventional one")
    net, meta = load_checkpoint(_checkpoint_path(args.checkpoint[0]))
    if meta.get("kind") != "direct":
        raise ConfigError("the first checkpoint must be a direct (chunk-to-chunk) model")
    e, s, d = cfg["eval"], cfg["sample"], cfg["data"]
    ds = load_split(args, cfg, "eval")
    ev = ds.subset(np.arange(min(len(ds), e["max_eval"])))
    metrics.nfe_sweep(net, ev, e["nfe_list"], csv_path=run / "nfe_sweep.csv", config_hash=cfg.digest())

    L = ds.chunk_shape[0]
    rows = []
    for vid in sorted(ds.videos):
        frames = ds.videos[vid].frames
        if frames.shape[0] >= (e["rollout_chunks"] + 1) * L:
            errs = metrics.rollout_errors(net, frames, L, e["rollout_chunks"], s["nfe"])
            rows += [(vid, 0, k, err) for k, err in enumerate(errs, start=1)]
    if not rows:
        raise DegenerateInputError(f"no eval video is long enough for a {e['rollout_chunks']}-chunk rollout")
    fileio.write_csv(run / "rollout.csv", metrics.ROLLOUT_HEADER, rows)

    fileio.write_csv(run / "per_category.csv", metrics.PER_CATEGORY_HEADER,
                     metrics.per_category(net, ds, s["nfe"], d["motion_classes"], d["camera_classes"]))

    if len(args.checkpoint) == 2:
        conv, cmeta = load_checkpoint(_checkpoint_path(args.checkpoint[1]))
        if cmeta.get("kind") != "conventional":
            raise ConfigError("the second checkpoint must be a conventional-baseline model")
        if list(conv.widths[1:-1]) != list(net.widths[1:-1]) or conv.time_width != net.time_width:
            raise ConfigError("scaling comparison needs matched hidden widths and time embedding")
        direct, conventional = metrics.scaling_comparison(e["volumes"], net.widths[1:-1], net.time_width)
        fileio.write_csv(run / "scaling.csv", ("k_direct", "k_conventional", "slope_ratio"),
                         [(direct.k, conventional.k, direct.k / conventional.k)])


SCALING_HEADER = ("volume", "direct_cost", "conventional_cost")


def cmd_memfit(args, cfg, run, seed) -> None:
    m, e = cfg["model"], cfg["eval"]
    direct, conventional = metrics.scaling_comparison(e["volumes"], m["hidden"], m["time_width"])
    fileio.write_csv(run / "scaling_points.csv", SCALING_HEADER,
                     [(int(v), int(a), int(b)) for (v, a), (_, b) in zip(direct.points, conventional.points)])
    fileio.write_csv(run / "scaling.csv", ("k_direct", "b_direct", "k_conventional", "b_conventional", "slope_ratio"),
                     [(direct.k, direct.b, conventional.k, conventional.b, direct.k / conventional.k)])


HANDLERS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "sample": cmd_sample,
    "invert": cmd_invert, "otplan": cmd_otplan, "evaluate": cmd_evaluate, "memfit": cmd_memfit,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chunkflow", description="Chunk-to-chunk flow matching at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "verify":
            p.add_argument("--run", required=True, help="run directory to check against its manifest")
            continue
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="overrides run.seed")
        p.add_argument("--out", default="runs", help="parent directory for the run directory")
        if name != "gen-data" and name != "memfit":
            p.add_argument("--data", default=None, help="gen-data run directory or manifest (overrides data.dataset)")
        if name in ("sample", "invert", "evaluate"):
            p.add_argument("--checkpoint", action="append", default=[], help="checkpoint .fc2s (repeatable)")
        if name == "finetune":
            p.add_argument("--pretrained", default=None, help="pretrained checkpoint (overrides train.pretrained)")
        if name == "sample":
            p.add_argument("--chunk-id", type=int, default=None)
            p.add_argument("--nfe", type=int, default=None)
            p.add_argument("--n-chunks", type=int, default=None)
    return parser


def run_command(args) -> Path:
    """Execute a parsed command and return its run directory."""
    cfg = cfgmod.load(args.config)
    if args.seed is not None:
        cfg.set("run.seed", args.seed)
    seed = int(cfg["run"]["seed"])
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    if args.command == "finetune":
        recipe_from_config(cfg, seed).validate()  # recipe errors surface before a run directory exists
    run = rundir.RunDirectory(args.out, args.command, cfg.echo(), cfg.digest())
    try:
        HANDLERS[args.command](args, cfg, run, seed)
    except Exception as exc:
        run.abandon(f"{type(exc).__name__}: {exc}")
        raise
    run.finalize()
    return run.path


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            problems = rundir.verify(args.run)
            for p in problems:
                print(p, file=sys.stderr)
            if problems:
                return rundir.VerifyError.exit_code
            print(f"ok {args.run}")
            return 0
        path = run_command(args)
    except ChunkflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
