"""Run-directory store for ``pipeline.run``.

Layout::

    <root>/LOCK                      exclusive lock (pid inside), removed on exit
    <root>/config.ini                config echo (written by the CLI)
    <root>/iter<i>/targets           TGTS
    <root>/iter<i>/codebook-<j>      CDBK, one per target stream
    <root>/iter<i>/rvq               RVQM, RVQ-target iterations only
    <root>/iter<i>/ckpt              CKPT of the trained encoder
    <root>/iter<i>/metrics.json      IterationRecord, written last

An iteration counts as complete only once ``metrics.json`` exists, so a run
killed mid-iteration redoes that iteration and nothing else. Every file is
written to a temporary name and renamed into place.
"""
from __future__ import annotations

import os
from pathlib import Path

from ..pipeline import IterationRecord, bundle_hash
from . import codecs

LOCK_NAME = "LOCK"


class LockedError(RuntimeError):
    pass


def atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


class RunStore:
    def __init__(self, root):
        self.root = Path(root)
        self._locked = False

    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.root / LOCK_NAME, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockedError(f"run directory {self.root} is locked by {self.root / LOCK_NAME}") from None
        with os.fdopen(fd, "w") as f:
            f.write(f"{os.getpid()}\n")
        self._locked = True

    def unlock(self):
        if self._locked:
            (self.root / LOCK_NAME).unlink(missing_ok=True)
            self._locked = False

    def iter_dir(self, index: int) -> Path:
        return self.root / f"iter{index}"

    def has_iteration(self, index: int) -> bool:
        d = self.iter_dir(index)
        return (d / "metrics.json").exists() and (d / "ckpt").exists()

    def load_record(self, index: int) -> IterationRecord:
        return IterationRecord.from_json((self.iter_dir(index) / "metrics.json").read_text("utf-8"))

    def load_iteration(self, index: int):
        model, _ = codecs.encoder_from_bytes((self.iter_dir(index) / "ckpt").read_bytes())
        return self.load_record(index), model

    def save_targets(self, index: int, bundle, extras: dict):
        d = self.iter_dir(index)
        atomic_write(d / "targets", codecs.targets_to_bytes(bundle))
        refs = []
        for j, cb in enumerate(bundle.codebooks):
            atomic_write(d / f"codebook-{j}", codecs.codebook_to_bytes(cb))
            refs.append(f"iter{index}/codebook-{j}")
        if "rvq" in extras:
            atomic_write(d / "rvq", codecs.rvq_to_bytes(extras["rvq"]))
        return refs, bundle_hash(bundle)

    def save_iteration(self, record: IterationRecord, model) -> str:
        d = self.iter_dir(record.index)
        atomic_write(d / "ckpt", codecs.encoder_to_bytes(model, {"iteration": record.index}))
        atomic_write(d / "metrics.json", (record.to_json() + "\n").encode("utf-8"))
        return f"iter{record.index}/ckpt"

    def records(self) -> list[IterationRecord]:
        out, i = [], 1
        while self.has_iteration(i):
            out.append(self.load_record(i))
            i += 1
        return out
