"""On-disk formats: the FC2S binary tensor container, 8-bit PGM images, CSV rows.

FC2S layout (all little-endian)::

    b"FC2S" | version u32 | rank u32 | dims u32 * rank | payload f64 row-major
"""

from __future__ import annotations

import csv
import hashlib
import io
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError

MAGIC = b"FC2S"
FORMAT_VERSION = 1


def tensor_bytes(array) -> bytes:
    a = np.ascontiguousarray(array, dtype="<f8")
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes(order="C")


def save_tensor(path, array) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(tensor_bytes(array))
    return path


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise ShapeError("not an FC2S tensor (bad magic)")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ShapeError(f"unsupported FC2S version {version}")
    offset = 12 + 4 * rank
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - offset != 8 * count:
        raise ShapeError(f"payload holds {(len(buf) - offset) // 8} values, header says {count}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return data.reshape(dims).astype(np.float64)


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def save_pgm(path, image) -> Path:
    """Write a 2-D array with values in [0, 1] as binary 8-bit PGM (P5)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"PGM export needs a 2-D frame, got shape {img.shape}")
    gray = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = gray.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())
    return path


def load_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ShapeError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pixels = np.frombuffer(parts[4][: w * h], dtype=np.uint8)
    return pixels.reshape(h, w).astype(np.float64) / maxval


def fmt(value) -> str:
    """Stable text form for CSV cells; floats use repr so reruns are byte-identical."""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(header, rows))
    return path


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
