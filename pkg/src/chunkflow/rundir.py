"""Run directories: one per command invocation, never reused.

Layout: ``<out>/<command>-<UTC timestamp>-<config hash>/`` holding the resolved
config, the artifacts, and ``MANIFEST.sha256`` listing every artifact with its
digest. A ``.lock`` file marks the directory as owned by a live process.
"""

from __future__ import annotations

import os
import time
from pathlib import Path

from . import fileio
from .errors import ChunkflowError

MANIFEST_NAME = "MANIFEST.sha256"
LOCK_NAME = ".lock"
CONFIG_NAME = "config.resolved.ini"


class VerifyError(ChunkflowError):
    exit_code = 1


class RunDirectory:
    def __init__(self, out_root, command: str, config_text: str, digest: str):
        root = Path(out_root)
        root.mkdir(parents=True, exist_ok=True)
        stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
        base = f"{command}-{stamp}-{digest}"
        path, n = root / base, 1
        while True:
            try:
                path.mkdir()
                break
            except FileExistsError:
                n += 1
                path = root / f"{base}-{n}"
        self.path = path
        fd = os.open(path / LOCK_NAME, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        (path / CONFIG_NAME).write_text(config_text)

    def __truediv__(self, rel) -> Path:
        return self.path / rel

    def artifacts(self) -> list[str]:
        out = []
        for p in sorted(self.path.rglob("*")):
            rel = p.relative_to(self.path).as_posix()
            if p.is_file() and rel not in (MANIFEST_NAME, LOCK_NAME):
                out.append(rel)
        return out

    def finalize(self) -> Path:
        lines = [f"{fileio.sha256_file(self.path / rel)}  {rel}" for rel in self.artifacts()]
        manifest = self.path / MANIFEST_NAME
        manifest.write_text("\n".join(lines) + "\n")
        (self.path / LOCK_NAME).unlink(missing_ok=True)
        return manifest

    def abandon(self, reason: str) -> None:
        """Mark a failed run: no manifest is written, so ``verify`` rejects it."""
        (self.path / "FAILED").write_text(reason + "\n")
        (self.path / LOCK_NAME).unlink(missing_ok=True)


def read_manifest(run_dir) -> dict[str, str]:
    manifest = Path(run_dir) / MANIFEST_NAME
    if not manifest.exists():
        raise VerifyError(f"{run_dir}: no {MANIFEST_NAME} (run incomplete or still locked)")
    entries = {}
    for line in manifest.read_text().splitlines():
        if line.strip():
            digest, rel = line.split("  ", 1)
            entries[rel] = digest
    return entries


def verify(run_dir) -> list[str]:
    """Problems found in ``run_dir`` (missing or altered listed files); empty when intact."""
    run_dir = Path(run_dir)
    problems = []
    for rel, digest in read_manifest(run_dir).items():
        p = run_dir / rel
        if not p.is_file():
            problems.append(f"missing: {rel}")
        elif fileio.sha256_file(p) != digest:
            problems.append(f"modified: {rel}")
    return problems
