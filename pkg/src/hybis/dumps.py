"""Raw dump files with differential range updates.

A dump starts as a headerless flat image of guest memory (file offset ==
physical offset).  Later updates overwrite selected ranges in place after
saving the previous contents to per-checkpoint backup files, so any earlier
checkpoint can be reconstructed by layering backups in reverse over the
current base.  A JSON sidecar manifest records the checkpoint history.
"""

from __future__ import annotations

import json
import mmap
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import (
    IoFailure,
    MissingBackupFile,
    OutOfRange,
    SizeMismatch,
    SourceUnavailable,
)

Range = tuple[int, int]  # (start, length)


@runtime_checkable
class MemorySource(Protocol):
    """Readable byte space of known size (live guest or opened dump)."""

    @property
    def size(self) -> int: ...

    def read(self, start: int, length: int) -> bytes: ...


class BufferSource:
    """In-memory source, mostly for tests and synthetic images."""

    def __init__(self, data: bytes, step: int = 0):
        self._data = bytes(data)
        self.step = step

    @property
    def size(self) -> int:
        return len(self._data)

    def read(self, start: int, length: int) -> bytes:
        _check_range(start, length, len(self._data))
        return self._data[start : start + length]


class FileSource:
    """Read-only source over a raw dump file, memory-mapped."""

    def __init__(self, path: str | Path, step: int = 0):
        self.path = Path(path)
        self.step = step
        try:
            self._fh = open(self.path, "rb")
            self._mm = mmap.mmap(self._fh.fileno(), 0, access=mmap.ACCESS_READ)
        except OSError as exc:
            raise IoFailure(f"cannot open dump {self.path}: {exc}") from exc

    @property
    def size(self) -> int:
        return len(self._mm)

    def read(self, start: int, length: int) -> bytes:
        _check_range(start, length, self.size)
        return bytes(self._mm[start : start + length])

    def close(self) -> None:
        self._mm.close()
        self._fh.close()

    def __enter__(self) -> "FileSource":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _check_range(start: int, length: int, size: int) -> None:
    if start < 0 or length < 0 or start + length > size:
        raise OutOfRange(f"range [{start:#x}, {start + length:#x}) outside size {size:#x}")


@dataclass
class Checkpoint:
    id: int
    source_step: int
    ranges: list[tuple[int, int, str]] = field(default_factory=list)  # (start, length, backup_path)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "source_step": self.source_step,
            "ranges": [
                {"start": s, "length": l, "backup_path": p} for s, l, p in self.ranges
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Checkpoint":
        return cls(
            id=int(doc["id"]),
            source_step=int(doc["source_step"]),
            ranges=[(int(r["start"]), int(r["length"]), r["backup_path"]) for r in doc["ranges"]],
        )


@dataclass
class DumpManifest:
    base_path: str
    memory_size: int
    checkpoints: list[Checkpoint] = field(default_factory=list)
    created_at_step: int = 0

    @property
    def manifest_path(self) -> str:
        return manifest_path_for(self.base_path)

    @property
    def latest_id(self) -> int:
        return self.checkpoints[-1].id

    def checkpoint(self, checkpoint_id: int) -> Checkpoint:
        for cp in self.checkpoints:
            if cp.id == checkpoint_id:
                return cp
        raise OutOfRange(f"no checkpoint {checkpoint_id} in manifest")

    def to_json(self) -> dict:
        return {
            "memory_size": self.memory_size,
            "base_path": self.base_path,
            "created_at_step": self.created_at_step,
            "checkpoints": [cp.to_json() for cp in self.checkpoints],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DumpManifest":
        return cls(
            base_path=doc["base_path"],
            memory_size=int(doc["memory_size"]),
            checkpoints=[Checkpoint.from_json(c) for c in doc["checkpoints"]],
            created_at_step=int(doc["created_at_step"]),
        )

    def save(self) -> None:
        try:
            Path(self.manifest_path).write_text(
                json.dumps(self.to_json(), indent=2), encoding="utf-8"
            )
        except OSError as exc:
            raise IoFailure(f"cannot write manifest: {exc}") from exc


def manifest_path_for(base_path: str | Path) -> str:
    return f"{base_path}.manifest.json"


def load_manifest(path: str | Path) -> DumpManifest:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    return DumpManifest.from_json(doc)


def dump_full(source: MemorySource, path: str | Path) -> DumpManifest:
    """Write a full raw dump of the source and start a manifest for it."""
    try:
        snapshot = source.read(0, source.size)  # one call == one step
    except OutOfRange:
        raise
    except Exception as exc:
        raise SourceUnavailable(f"cannot snapshot source: {exc}") from exc
    step = getattr(source, "step", 0)
    try:
        Path(path).write_bytes(snapshot)
    except OSError as exc:
        raise IoFailure(f"cannot write dump {path}: {exc}") from exc
    manifest = DumpManifest(
        base_path=str(path),
        memory_size=source.size,
        checkpoints=[Checkpoint(id=0, source_step=step)],
        created_at_step=step,
    )
    manifest.save()
    return manifest


def dump_update_range(manifest: DumpManifest, rng: Range, source: MemorySource) -> Checkpoint:
    """Refresh one range of the base dump, backing up what it overwrites.

    Disk traffic is proportional to the range, never to the full memory:
    one backup file of |range| bytes plus an in-place write of |range| bytes.
    """
    start, length = rng
    _check_range(start, length, manifest.memory_size)
    if source.size != manifest.memory_size:
        raise SizeMismatch(
            f"source size {source.size} != manifest memory_size {manifest.memory_size}"
        )
    cp_id = manifest.latest_id + 1
    backup_path = f"{manifest.base_path}.ckpt{cp_id}.{start}-{start + length}.bak"
    fresh = source.read(start, length)  # step-atomic snapshot of the range
    try:
        with open(manifest.base_path, "r+b") as fh:
            fh.seek(start)
            previous = fh.read(length)
            if len(previous) != length:
                raise SizeMismatch(f"base dump shorter than manifest claims: {manifest.base_path}")
            Path(backup_path).write_bytes(previous)
            fh.seek(start)
            fh.write(fresh)
    except OSError as exc:
        raise IoFailure(f"cannot update dump {manifest.base_path}: {exc}") from exc
    checkpoint = Checkpoint(
        id=cp_id,
        source_step=getattr(source, "step", 0),
        ranges=[(start, length, backup_path)],
    )
    manifest.checkpoints.append(checkpoint)
    manifest.save()
    return checkpoint


def reconstruct(manifest: DumpManifest, checkpoint_id: int, rng: Range) -> bytes:
    """Return the bytes of a range exactly as they stood at a checkpoint."""
    start, length = rng
    _check_range(start, length, manifest.memory_size)
    manifest.checkpoint(checkpoint_id)  # raises for unknown ids
    try:
        with open(manifest.base_path, "rb") as fh:
            fh.seek(start)
            view = bytearray(fh.read(length))
    except OSError as exc:
        raise IoFailure(f"cannot read dump {manifest.base_path}: {exc}") from exc
    if len(view) != length:
        raise SizeMismatch(f"base dump shorter than manifest claims: {manifest.base_path}")
    # Newest first: each backup rolls the overlapping bytes one update back.
    for cp in reversed(manifest.checkpoints):
        if cp.id <= checkpoint_id:
            break
        for bstart, blength, backup_path in cp.ranges:
            lo = max(start, bstart)
            hi = min(start + length, bstart + blength)
            if lo >= hi:
                continue
            try:
                with open(backup_path, "rb") as bh:
                    bh.seek(lo - bstart)
                    chunk = bh.read(hi - lo)
            except OSError as exc:
                raise MissingBackupFile(f"backup {backup_path} unavailable: {exc}") from exc
            if len(chunk) != hi - lo:
                raise MissingBackupFile(f"backup {backup_path} truncated")
            view[lo - start : hi - start] = chunk
    return bytes(view)


def diff_checkpoints(
    manifest: DumpManifest, id_a: int, id_b: int, rng: Range
) -> list[Range]:
    """Maximal contiguous sub-ranges (absolute) where two checkpoints differ."""
    start, _ = rng
    a = np.frombuffer(reconstruct(manifest, id_a, rng), dtype=np.uint8)
    b = np.frombuffer(reconstruct(manifest, id_b, rng), dtype=np.uint8)
    changed = np.flatnonzero(a != b)
    if changed.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(changed) > 1)
    run_starts = np.concatenate(([0], breaks + 1))
    run_ends = np.concatenate((breaks, [changed.size - 1]))
    return [
        (start + int(changed[s]), int(changed[e]) - int(changed[s]) + 1)
        for s, e in zip(run_starts, run_ends)
    ]


def open_dump(target: DumpManifest | str | Path, expected_size: int | None = None) -> FileSource:
    """Open a raw dump read-only, verifying its length when it is known."""
    step = 0
    if isinstance(target, DumpManifest):
        path = Path(target.base_path)
        expected_size = target.memory_size
        step = target.checkpoints[-1].source_step if target.checkpoints else 0
    else:
        path = Path(target)
        sidecar = Path(manifest_path_for(path))
        if expected_size is None and sidecar.exists():
            manifest = load_manifest(sidecar)
            expected_size = manifest.memory_size
            step = manifest.checkpoints[-1].source_step if manifest.checkpoints else 0
    source = FileSource(path, step=step)
    if expected_size is not None and source.size != expected_size:
        actual = source.size
        source.close()
        raise SizeMismatch(f"dump {path} is {actual} bytes, expected {expected_size}")
    return source
