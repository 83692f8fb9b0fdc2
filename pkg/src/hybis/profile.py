"""Kernel layout profiles.

A profile is a data-driven description of how the miniature kernel lays out
its objects: the process-object signature and field offsets, the pool region
that holds all process objects, and where to look for the kernel debug block
that anchors the two process lists.  Everything that parses raw memory bytes
goes through a profile, so alternative layouts can be exercised purely from
JSON.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import InvalidConfig

PAGE_SIZE = 4096

# Offsets inside the kernel debug block (relative to the block's base).
KDB_TRACK_HEAD_OFFSET = 8
KDB_SCHED_HEAD_OFFSET = 16
KDB_BLOCK_SIZE = 24

U32 = struct.Struct("<I")
U64 = struct.Struct("<Q")

DEFAULT_OFFSETS = {
    "pid": 4,
    "state": 8,
    "ticks": 12,
    "name": 16,
    "track_flink": 32,
    "track_blink": 40,
    "sched_flink": 48,
    "sched_blink": 56,
}


@dataclass(frozen=True)
class KernelProfile:
    """Layout description all carving and list walking obeys."""

    version: int = 1
    proc_tag: bytes = b"PROC"
    object_size: int = 64
    alignment: int = 64
    pool_region: tuple[int, int] = (0x40000, 0x40000)
    kdb_tag: bytes = b"SIMK"
    kdb_scan_region: tuple[int, int] = (0x10000, 0x10000)
    name_length: int = 16
    offsets: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_OFFSETS))

    def __post_init__(self) -> None:
        if len(self.proc_tag) != 4 or len(self.kdb_tag) != 4:
            raise InvalidConfig("signature tags must be exactly 4 bytes")
        if self.alignment <= 0 or self.object_size <= 0:
            raise InvalidConfig("object_size and alignment must be positive")
        missing = set(DEFAULT_OFFSETS) - set(self.offsets)
        if missing:
            raise InvalidConfig(f"profile offsets missing fields: {sorted(missing)}")
        widths = {
            "pid": 4,
            "state": 4,
            "ticks": 4,
            "name": self.name_length,
            "track_flink": 8,
            "track_blink": 8,
            "sched_flink": 8,
            "sched_blink": 8,
        }
        for name, width in widths.items():
            off = self.offsets[name]
            if off < 0 or off + width > self.object_size:
                raise InvalidConfig(f"field {name!r} does not fit in object_size")
        for region_name, (start, length) in (
            ("pool_region", self.pool_region),
            ("kdb_scan_region", self.kdb_scan_region),
        ):
            if start < 0 or length <= 0:
                raise InvalidConfig(f"{region_name} must have start >= 0, length > 0")
        if self.pool_region[0] % self.alignment:
            raise InvalidConfig("pool_region start must be alignment-aligned")

    # -- field accessors -------------------------------------------------

    def __getattr__(self, name: str) -> int:
        # pid_offset, sched_flink_offset, ... resolve through the offsets map.
        if name.endswith("_offset") and name[:-7] in self.offsets:
            return self.offsets[name[:-7]]
        raise AttributeError(name)

    @property
    def pool_end(self) -> int:
        return self.pool_region[0] + self.pool_region[1]

    def pool_capacity(self) -> int:
        return self.pool_region[1] // self.alignment

    def validate_bounds(self, memory_size: int) -> None:
        """Check that both declared regions fit in a memory of this size."""
        for region_name, (start, length) in (
            ("pool_region", self.pool_region),
            ("kdb_scan_region", self.kdb_scan_region),
        ):
            if start + length > memory_size:
                raise InvalidConfig(
                    f"{region_name} [{start:#x}, {start + length:#x}) exceeds "
                    f"memory size {memory_size:#x}"
                )

    # -- JSON ------------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "proc_tag": self.proc_tag.decode("ascii"),
            "object_size": self.object_size,
            "alignment": self.alignment,
            "pool_region": list(self.pool_region),
            "kdb_tag": self.kdb_tag.decode("ascii"),
            "kdb_scan_region": list(self.kdb_scan_region),
            "name_length": self.name_length,
            "offsets": dict(self.offsets),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "KernelProfile":
        try:
            kwargs = dict(doc)
            for key in ("proc_tag", "kdb_tag"):
                if key in kwargs:
                    kwargs[key] = kwargs[key].encode("ascii")
            for key in ("pool_region", "kdb_scan_region"):
                if key in kwargs:
                    kwargs[key] = tuple(kwargs[key])
            return cls(**kwargs)
        except (TypeError, ValueError, AttributeError) as exc:
            raise InvalidConfig(f"malformed profile document: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "KernelProfile":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")


def default_profile(memory_size: int) -> KernelProfile:
    """Profile whose pool region spans a quarter of the given memory.

    All process objects are allocated from that pool by construction, which
    is what makes quarter-sized differential watches sufficient.
    """
    pool_start = 0x40000
    pool_length = memory_size // 4
    profile = KernelProfile(pool_region=(pool_start, pool_length))
    profile.validate_bounds(memory_size)
    return profile


def scaled(profile: KernelProfile, **overrides) -> KernelProfile:
    """Return a copy of a profile with selected fields replaced."""
    return replace(profile, **overrides)
