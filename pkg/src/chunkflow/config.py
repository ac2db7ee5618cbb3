"""Plain ``key = value`` run configuration.

Layout::

    # comment
    [train]
    rho = 0.7
    steps = 2000

Every key belongs to a section and has a documented default; unknown
sections or keys are rejected with the offending line number. ``echo()``
writes the fully-resolved config and ``parse(echo(c)) == c``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


PARSERS = {"int": int, "float": float, "str": str, "bool": _bool, "ints": _int_list, "strs": _str_list}


def _render(kind: str, value) -> str:
    if kind in ("ints", "strs"):
        return ",".join(str(v) for v in value)
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    return str(value)


# section -> key -> (type, default, doc)
SCHEMA: dict[str, dict[str, tuple[str, object, str]]] = {
    "run": {
        "seed": ("int", 0, "master seed; forked per subsystem (data/train/eval)"),
    },
    "data": {
        "dataset": ("str", "", "directory written by gen-data (read by every other command)"),
        "frames": ("int", 40, "frames per synthetic video"),
        "height": ("int", 8, "frame height in pixels"),
        "width": ("int", 8, "frame width in pixels"),
        "chunk_length": ("int", 4, "frames per chunk L"),
        "motion_classes": ("strs", ("slow", "medium", "fast"), "motion speed classes to generate"),
        "camera_classes": ("strs", ("static", "pan_tilt", "zoom", "complex"), "camera classes to generate"),
        "train_per_cell": ("int", 4, "training videos per (motion, camera) cell"),
        "eval_per_cell": ("int", 2, "evaluation videos per (motion, camera) cell"),
        "blob_sigma": ("float", 0.0, "blob std in px; 0 means 0.08 * min(H, W)"),
        "scene_bins": ("int", 32, "histogram bins for scene-cut detection"),
        "scene_threshold": ("float", 0.4, "L1 histogram distance that counts as a cut"),
    },
    "model": {
        "hidden": ("ints", (256, 256), "hidden layer widths of the tanh MLP"),
        "time_width": ("int", 16, "sinusoidal time embedding width (even)"),
        "out_scale": ("float", 1.0, "scale of the output layer at initialisation"),
    },
    "train": {
        "algorithm": ("str", "alg1_oc_ti", "alg1_oc_ti | alg2_plain | alg3_oc_only | conventional_baseline"),
        "coupling": ("str", "inherent", "inherent | independent | minibatch_ot"),
        "rho": ("float", 0.7, "target-inversion probability (alg1 only)"),
        "steps": ("int", 2000, "optimizer steps for finetune"),
        "pretrain_steps": ("int", 2000, "optimizer steps for noise-to-data pretraining"),
        "batch_size": ("int", 32, "pairs per step"),
        "lr": ("float", 2e-4, "base learning rate"),
        "lr_schedule": ("str", "linear", "constant | linear | cosine"),
        "beta1": ("float", 0.9, "AdamW first-moment decay"),
        "beta2": ("float", 0.99, "AdamW second-moment decay"),
        "eps": ("float", 1e-8, "AdamW epsilon"),
        "weight_decay": ("float", 0.0, "decoupled weight decay"),
        "timestep": ("str", "uniform", "uniform | logit_normal"),
        "logit_loc": ("float", 0.0, "logit-normal location"),
        "logit_scale": ("float", 1.0, "logit-normal scale"),
        "shift": ("float", 1.0, "timestep shift factor (1 = off)"),
        "sigma0": ("float", 0.3, "source latent scale used by target inversion"),
        "inversion_steps": ("int", 50, "steps of the backward ODE solve"),
        "inversion_order": ("int", 2, "1 = Euler, 2 = Taylor with finite-difference derivative"),
        "inversion_r": ("float", 0.5, "probe fraction of the second-order inversion step"),
        "init": ("str", "pretrained", "pretrained | from_scratch"),
        "pretrained": ("str", "", "pretrained checkpoint (.fc2s); --pretrained overrides"),
        "checkpoint_every": ("int", 500, "checkpoint interval in steps (0 = final only)"),
    },
    "sample": {
        "nfe": ("int", 5, "Euler steps per generated chunk"),
        "n_chunks": ("int", 1, "chunks generated autoregressively"),
        "chunk_id": ("int", 0, "row of the eval manifest used as input"),
    },
    "eval": {
        "nfe_list": ("ints", (1, 5, 10, 40), "NFE values of the sweep"),
        "rollout_chunks": ("int", 4, "chunks per rollout"),
        "max_eval": ("int", 256, "cap on evaluated pairs (first rows of the eval split)"),
        "mask": ("str", "no_self", "OT plan mask: none | no_self | next_only"),
        "ot_videos": ("int", 10, "videos in the OT plan batch"),
        "ot_chunk_length": ("int", 0, "chunk length for OT plans; 0 uses data.chunk_length"),
        "ot_fallback": ("bool", True, "price infeasible masks instead of failing"),
        "ot_penalty": ("float", 1e6, "penalty factor (times max cost) for forbidden matches"),
        "volumes": ("ints", (256, 512, 1024, 2048, 4096), "effective volumes V for the scaling fit"),
    },
}


@dataclass
class Config:
    values: dict[str, dict[str, object]] = field(default_factory=lambda: {
        sec: {k: spec[1] for k, spec in keys.items()} for sec, keys in SCHEMA.items()})

    def get(self, dotted: str):
        sec, key = dotted.split(".", 1)
        return self.values[sec][key]

    def set(self, dotted: str, value) -> None:
        sec, key = dotted.split(".", 1)
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"unknown config key {dotted!r}")
        kind = SCHEMA[sec][key][0]
        if isinstance(value, str) and kind != "str":
            try:
                value = PARSERS[kind](value)
            except ValueError as exc:
                raise ConfigError(f"{dotted}: {exc}") from exc
        self.values[sec][key] = value

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def echo(self) -> str:
        lines = ["# fully-resolved configuration"]
        for sec, keys in SCHEMA.items():
            lines.append(f"[{sec}]")
            for key, (kind, _, doc) in keys.items():
                lines.append(f"# {doc}")
                lines.append(f"{key} = {_render(kind, self.values[sec][key])}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.echo().encode()).hexdigest()[:8]


def parse(text: str, source: str = "<config>") -> Config:
    cfg = Config()
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{source}:{lineno}: malformed section header {line!r}")
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key {key!r} appears before any [section]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r} in [{section}]")
        kind = SCHEMA[section][key][0]
        try:
            cfg.values[section][key] = PARSERS[kind](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {section}.{key}: {exc}") from exc
    return cfg


def load(path) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse(path.read_text(), str(path))
