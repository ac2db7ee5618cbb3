"""Synthetic videos, scene-cut detection and non-overlapping chunk pairing.

A video is a single Gaussian blob moving at constant apparent velocity with
elastic reflection off a margin box. Motion classes set the speed range, camera
classes add a global translation (pan/tilt), a per-frame scale about the frame
centre (zoom), or both (complex).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fileio
from .errors import ConfigError, DegenerateInputError, ShapeError
from .numerics import make_rng

MOTION_CLASSES = ("slow", "medium", "fast")
CAMERA_CLASSES = ("static", "pan_tilt", "zoom", "complex")

SPEED_RANGES = {"slow": (0.2, 0.6), "medium": (0.6, 1.4), "fast": (1.4, 2.8)}
PAN_SPEED = (0.2, 0.6)
ZOOM_RATE = (0.995, 1.005)
MANIFEST_VERSION = 1


@dataclass
class SyntheticVideo:
    frames: np.ndarray            # (F, H, W) in [0, 1]
    motion_class: str
    camera_class: str
    seed: int
    trajectory: np.ndarray        # (F, 2) rendered blob centre (row, col)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class ChunkPair:
    x0: np.ndarray                # (L, H, W) current chunk
    x1: np.ndarray                # (L, H, W) succeeding chunk
    video_id: int
    chunk_index: int
    start_frame: int = 0
    motion_class: str = ""
    camera_class: str = ""

    @property
    def dim(self) -> int:
        return self.x0.size


def _check_classes(motion_class: str, camera_class: str) -> None:
    if motion_class not in MOTION_CLASSES:
        raise ConfigError(f"unknown motion class {motion_class!r}; expected one of {MOTION_CLASSES}")
    if camera_class not in CAMERA_CLASSES:
        raise ConfigError(f"unknown camera class {camera_class!r}; expected one of {CAMERA_CLASSES}")


def render_blob(center, sigma: float, height: int, width: int) -> np.ndarray:
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    r2 = (rows - center[0]) ** 2 + (cols - center[1]) ** 2
    return np.exp(-0.5 * r2 / (sigma * sigma))


def _reflect(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    if hi <= lo:
        return (lo + hi) / 2, vel
    while pos < lo or pos > hi:
        if pos < lo:
            pos, vel = 2 * lo - pos, -vel
        else:
            pos, vel = 2 * hi - pos, -vel
    return pos, vel


def gen_blob_video(seed: int, n_frames: int, height: int, width: int,
                   motion_class: str = "slow", camera_class: str = "static", *,
                   sigma: float | None = None, velocity=None, start=None) -> SyntheticVideo:
    """Render a bouncing Gaussian blob video.

    ``velocity`` (row, col px/frame) and ``start`` override the seeded draws;
    the camera class still applies on top of an explicit velocity.
    """
    _check_classes(motion_class, camera_class)
    if n_frames < 4 or height < 8 or width < 8:
        raise ShapeError(f"need F >= 4 and H, W >= 8, got F={n_frames}, H={height}, W={width}")
    rng = make_rng(seed, "blob-video", motion_class, camera_class)
    sigma0 = 0.08 * min(height, width) if sigma is None else float(sigma)
    margin = 2.5 * sigma0
    lo = np.array([margin, margin])
    hi = np.array([height - 1 - margin, width - 1 - margin])

    if start is None:
        pos = lo + rng.uniform(0.0, 1.0, 2) * (hi - lo)
    else:
        pos = np.array(start, dtype=np.float64)
    if velocity is None:
        speed = rng.uniform(*SPEED_RANGES[motion_class])
        angle = rng.uniform(0.0, 2 * np.pi)
        vel = speed * np.array([np.sin(angle), np.cos(angle)])
    else:
        vel = np.array(velocity, dtype=np.float64)

    pan = np.zeros(2)
    if camera_class in ("pan_tilt", "complex"):
        angle = rng.uniform(0.0, 2 * np.pi)
        pan = rng.uniform(*PAN_SPEED) * np.array([np.sin(angle), np.cos(angle)])
    zoom = 1.0
    if camera_class in ("zoom", "complex"):
        zoom = rng.uniform(*ZOOM_RATE)
        if rng.uniform() < 0.5:
            zoom = 1.0 / zoom
    centre = np.array([(height - 1) / 2.0, (width - 1) / 2.0])

    frames = np.empty((n_frames, height, width))
    traj = np.empty((n_frames, 2))
    step = vel - pan  # apparent per-frame displacement before zoom
    scale = 1.0
    for k in range(n_frames):
        s = float(np.clip(sigma0 * scale, 0.5 * sigma0, 2.0 * sigma0))
        frames[k] = render_blob(pos, s, height, width)
        traj[k] = pos
        new = centre + (pos + step - centre) * zoom
        for axis in range(2):
            reflected, flip = _reflect(new[axis], 1.0, lo[axis], hi[axis])
            new[axis] = reflected
            if flip < 0:
                step[axis] = -step[axis]
        pos = new
        scale *= zoom
    np.clip(frames, 0.0, 1.0, out=frames)
    return SyntheticVideo(frames, motion_class, camera_class, int(seed), traj)


def gen_lds_sequence(seed: int, n_frames: int, dim: int, spectral_radius: float = 0.95, *,
                     noise: float = 0.0, matrix=None, x0=None) -> np.ndarray:
    """Linear dynamical system x_{k+1} = A x_k + noise * eta.

    The default ``A`` is ``spectral_radius`` times a random orthogonal matrix, so
    its operator norm equals its spectral radius.
    """
    if not 0.0 < spectral_radius <= 1.0:
        raise ConfigError(f"spectral_radius must lie in (0, 1], got {spectral_radius}")
    rng = make_rng(seed, "lds")
    if matrix is None:
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        q = q * np.sign(np.diag(r))
        a = spectral_radius * q
    else:
        a = np.asarray(matrix, dtype=np.float64)
        if a.shape != (dim, dim):
            raise ShapeError(f"matrix shape {a.shape} != ({dim}, {dim})")
    x = rng.standard_normal(dim) if x0 is None else np.asarray(x0, dtype=np.float64)
    out = np.empty((n_frames, dim))
    for k in range(n_frames):
        out[k] = x
        x = a @ x + noise * rng.standard_normal(dim)
    return out


def frame_histograms(frames: np.ndarray, bins: int) -> np.ndarray:
    """L1-normalised equal-width intensity histograms on [0, 1], one row per frame."""
    flat = np.clip(frames.reshape(frames.shape[0], -1), 0.0, 1.0)
    idx = np.minimum((flat * bins).astype(np.int64), bins - 1)
    hist = np.zeros((frames.shape[0], bins))
    for k in range(frames.shape[0]):
        hist[k] = np.bincount(idx[k], minlength=bins)
    return hist / flat.shape[1]


def detect_scene_cuts(video, bins: int = 32, threshold: float = 0.4) -> list[int]:
    """Frame indices i where the histogram L1 distance between frames i-1 and i exceeds ``threshold``."""
    if bins < 2:
        raise ConfigError(f"histogram needs at least 2 bins, got {bins}")
    frames = video.frames if isinstance(video, SyntheticVideo) else np.asarray(video)
    if frames.shape[0] < 2:
        return []
    hist = frame_histograms(frames, bins)
    dist = np.abs(np.diff(hist, axis=0)).sum(axis=1)
    return [int(i) + 1 for i in np.nonzero(dist > threshold)[0]]


def _segments(n_frames: int, cuts: Sequence[int]) -> list[tuple[int, int]]:
    bounds = [0] + sorted(c for c in set(cuts) if 0 < c < n_frames) + [n_frames]
    return list(zip(bounds[:-1], bounds[1:]))


def chunk_video(video, chunk_length: int, cuts: Sequence[int] = (), video_id: int = 0) -> list[ChunkPair]:
    """Pair-disjoint tiling at stride 2L inside each cut-free segment; remainders dropped."""
    if chunk_length < 1:
        raise ConfigError(f"chunk length must be >= 1, got {chunk_length}")
    frames = video.frames if isinstance(video, SyntheticVideo) else np.asarray(video)
    motion = getattr(video, "motion_class", "")
    camera = getattr(video, "camera_class", "")
    L = chunk_length
    pairs = []
    for a, b in _segments(frames.shape[0], cuts):
        for s in range(a, b - 2 * L + 1, 2 * L):
            pairs.append(ChunkPair(frames[s: s + L].copy(), frames[s + L: s + 2 * L].copy(),
                                   video_id, len(pairs), s, motion, camera))
    return pairs


def split_chunks(video, chunk_length: int, cuts: Sequence[int] = ()) -> list[tuple[int, np.ndarray]]:
    """Consecutive stride-L chunks within cut-free segments as (chunk index, chunk)."""
    frames = video.frames if isinstance(video, SyntheticVideo) else np.asarray(video)
    out = []
    for a, b in _segments(frames.shape[0], cuts):
        for s in range(a, b - chunk_length + 1, chunk_length):
            out.append((len(out), frames[s: s + chunk_length].copy()))
    return out


def blob_centroid(frame) -> tuple[float, float]:
    f = np.asarray(frame, dtype=np.float64)
    mass = f.sum()
    if not mass > 0:
        raise DegenerateInputError("centroid of a frame with no positive mass")
    rows = np.arange(f.shape[0], dtype=np.float64)
    cols = np.arange(f.shape[1], dtype=np.float64)
    return float(rows @ f.sum(axis=1) / mass), float(cols @ f.sum(axis=0) / mass)


# ---------------------------------------------------------------------------
# datasets on disk and in memory


@dataclass
class ChunkDataset:
    """Flattened chunk pairs plus the videos they came from."""

    x0: np.ndarray                      # (N, d)
    x1: np.ndarray                      # (N, d)
    video_ids: np.ndarray               # (N,)
    chunk_index: np.ndarray             # (N,)
    motion: list[str]
    camera: list[str]
    chunk_shape: tuple[int, int, int]   # (L, H, W)
    videos: dict[int, SyntheticVideo] = field(default_factory=dict)
    start_frame: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x0.shape[0]

    @property
    def dim(self) -> int:
        return int(np.prod(self.chunk_shape))

    @property
    def labels(self) -> list[tuple[int, int]]:
        return [(int(v), int(c)) for v, c in zip(self.video_ids, self.chunk_index)]

    def pair(self, i: int) -> ChunkPair:
        return ChunkPair(self.x0[i].reshape(self.chunk_shape), self.x1[i].reshape(self.chunk_shape),
                         int(self.video_ids[i]), int(self.chunk_index[i]),
                         0 if self.start_frame is None else int(self.start_frame[i]),
                         self.motion[i], self.camera[i])

    def subset(self, idx) -> "ChunkDataset":
        idx = np.asarray(idx, dtype=np.int64)
        vids = {int(v) for v in self.video_ids[idx]}
        return ChunkDataset(self.x0[idx], self.x1[idx], self.video_ids[idx], self.chunk_index[idx],
                            [self.motion[i] for i in idx], [self.camera[i] for i in idx],
                            self.chunk_shape, {v: self.videos[v] for v in vids if v in self.videos},
                            None if self.start_frame is None else self.start_frame[idx])

    def select(self, motion=None, camera=None) -> "ChunkDataset":
        idx = [i for i in range(len(self))
               if (motion is None or self.motion[i] == motion) and (camera is None or self.camera[i] == camera)]
        return self.subset(idx)

    @classmethod
    def from_pairs(cls, pairs: Sequence[ChunkPair], videos=None) -> "ChunkDataset":
        if not pairs:
            raise DegenerateInputError("cannot build a dataset from zero chunk pairs")
        shape = pairs[0].x0.shape
        return cls(np.stack([p.x0.ravel() for p in pairs]), np.stack([p.x1.ravel() for p in pairs]),
                   np.array([p.video_id for p in pairs]), np.array([p.chunk_index for p in pairs]),
                   [p.motion_class for p in pairs], [p.camera_class for p in pairs],
                   tuple(shape), dict(videos or {}), np.array([p.start_frame for p in pairs]))


def build_videos(seed: int, n_frames: int, height: int, width: int, per_cell: int,
                 motion_classes=MOTION_CLASSES, camera_classes=CAMERA_CLASSES, first_id: int = 0,
                 sigma: float | None = None) -> dict[int, SyntheticVideo]:
    """Generate ``per_cell`` videos for every (motion, camera) class cell, ids assigned in grid order."""
    videos = {}
    vid = first_id
    for motion in motion_classes:
        for camera in camera_classes:
            for _ in range(per_cell):
                videos[vid] = gen_blob_video(seed * 100003 + vid, n_frames, height, width,
                                             motion, camera, sigma=sigma)
                vid += 1
    return videos


def build_dataset(videos: dict[int, SyntheticVideo], chunk_length: int,
                  bins: int = 32, threshold: float = 0.4) -> ChunkDataset:
    pairs = []
    for vid in sorted(videos):
        cuts = detect_scene_cuts(videos[vid], bins, threshold)
        pairs += chunk_video(videos[vid], chunk_length, cuts, vid)
    return ChunkDataset.from_pairs(pairs, videos)


MANIFEST_FIELDS = ("path", "video_id", "chunk_index", "motion_class", "camera_class")


def write_dataset(root, dataset: ChunkDataset, name: str = "manifest.tsv") -> Path:
    """Write each pair as an FC2S tensor of shape (2, L, H, W) plus a tab-separated manifest.

    Source videos go under ``videos/`` so rollouts can read ground truth beyond one pair.
    """
    root = Path(root)
    L, H, W = dataset.chunk_shape
    lines = [f"# chunkflow-manifest version={MANIFEST_VERSION} chunk_length={L} frame_shape={H}x{W}"]
    for i in range(len(dataset)):
        vid, ci = int(dataset.video_ids[i]), int(dataset.chunk_index[i])
        rel = f"pairs/v{vid:05d}_c{ci:04d}.fc2s"
        fileio.save_tensor(root / rel, np.stack([dataset.x0[i].reshape(L, H, W), dataset.x1[i].reshape(L, H, W)]))
        lines.append("\t".join([rel, str(vid), str(ci), dataset.motion[i], dataset.camera[i]]))
    for vid in sorted(dataset.videos):
        v = dataset.videos[vid]
        rel = f"videos/v{vid:05d}.fc2s"
        if not (root / rel).exists():
            fileio.save_tensor(root / rel, v.frames)
            fileio.save_tensor(root / f"videos/v{vid:05d}.traj.fc2s", v.trajectory)
            (root / f"videos/v{vid:05d}.txt").write_text(
                f"motion_class={v.motion_class}\ncamera_class={v.camera_class}\nseed={v.seed}\n")
    path = root / name
    path.write_text("\n".join(lines) + "\n")
    return path


def read_dataset(manifest) -> ChunkDataset:
    manifest = Path(manifest)
    if not manifest.exists():
        raise ConfigError(f"manifest {manifest} does not exist")
    root = manifest.parent
    header, rows = None, []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            header = dict(kv.split("=", 1) for kv in line[1:].split() if "=" in kv)
            continue
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_FIELDS):
            raise ConfigError(f"{manifest}:{lineno}: expected {len(MANIFEST_FIELDS)} tab-separated fields")
        rows.append(parts)
    if header is None:
        raise ConfigError(f"{manifest}: missing header line")
    if int(header.get("version", -1)) != MANIFEST_VERSION:
        raise ConfigError(f"{manifest}: unsupported manifest version {header.get('version')}")
    L = int(header["chunk_length"])
    H, W = (int(v) for v in header["frame_shape"].split("x"))
    pairs, videos = [], {}
    for rel, vid, ci, motion, camera in rows:
        arr = fileio.load_tensor(root / rel)
        if arr.shape != (2, L, H, W):
            raise ShapeError(f"{rel}: shape {arr.shape} != (2, {L}, {H}, {W})")
        vid = int(vid)
        pairs.append(ChunkPair(arr[0], arr[1], vid, int(ci), 0, motion, camera))
        vpath = root / f"videos/v{vid:05d}.fc2s"
        if vid not in videos and vpath.exists():
            meta = dict(line.split("=", 1) for line in (root / f"videos/v{vid:05d}.txt").read_text().split())
            videos[vid] = SyntheticVideo(fileio.load_tensor(vpath), meta["motion_class"], meta["camera_class"],
                                         int(meta["seed"]), fileio.load_tensor(root / f"videos/v{vid:05d}.traj.fc2s"))
    ds = ChunkDataset.from_pairs(pairs, videos)
    ds.start_frame = None
    return ds
