from __future__ import annotations

import shutil
import struct
import tempfile
from pathlib import Path

import pytest

from hybis import GuestConfig, GuestMachine

MIB = 1024 * 1024


@pytest.fixture
def dump_dir(tmp_path):
    """Scratch directory for large dump files; prefers tmpfs when present.

    The desk-scale acceptance tests shuffle hundreds of MiB through dump
    files; criteria assert byte budgets, not I/O timing, so a memory-backed
    filesystem keeps the suite inside its runtime target on slow disks.
    """
    shm = Path("/dev/shm")
    if shm.is_dir():
        path = Path(tempfile.mkdtemp(prefix="hybis-test-", dir=shm))
        yield path
        shutil.rmtree(path, ignore_errors=True)
    else:
        yield tmp_path


def make_machine(memory_mib: int = 2, seed: int = 7, boot_plan=None) -> GuestMachine:
    kwargs = {"memory_size": memory_mib * MIB, "seed": seed}
    if boot_plan is not None:
        kwargs["boot_plan"] = boot_plan
    return GuestMachine.create(GuestConfig(**kwargs))


@pytest.fixture
def machine() -> GuestMachine:
    return make_machine()


@pytest.fixture
def booted() -> GuestMachine:
    m = make_machine()
    m.step(30)  # past the default plan's last spawn
    return m


# ---------------------------------------------------------------------------
# Independent oracles.  These deliberately re-derive facts from first
# principles (struct packing, byte loops) instead of calling the code paths
# they are meant to check.
# ---------------------------------------------------------------------------


def serialize_object(desc, profile) -> bytes:
    """Re-serialize a ground-truth descriptor into its expected 64 bytes."""
    obj = bytearray(profile.object_size)
    obj[0:4] = profile.proc_tag
    struct.pack_into("<I", obj, profile.offsets["pid"], desc.pid)
    struct.pack_into("<I", obj, profile.offsets["state"], desc.state.value)
    struct.pack_into("<I", obj, profile.offsets["ticks"], desc.ticks)
    raw_name = desc.name.encode("ascii", "replace")[: profile.name_length]
    obj[profile.offsets["name"] : profile.offsets["name"] + len(raw_name)] = raw_name
    for link, value in desc.links.items():
        struct.pack_into("<Q", obj, profile.offsets[link], value)
    return bytes(obj)


def bytewise_diff_runs(a: bytes, b: bytes, base: int = 0) -> list[tuple[int, int]]:
    """Maximal runs of differing bytes, computed the dumb way."""
    assert len(a) == len(b)
    runs = []
    start = None
    for i in range(len(a)):
        if a[i] != b[i]:
            if start is None:
                start = i
        elif start is not None:
            runs.append((base + start, i - start))
            start = None
    if start is not None:
        runs.append((base + start, len(a) - start))
    return runs


def changed_offsets(a: bytes, b: bytes) -> set[int]:
    assert len(a) == len(b)
    return {i for i in range(len(a)) if a[i] != b[i]}


def brute_force_tag_offsets(image: bytes, tag: bytes, start: int, length: int) -> set[int]:
    """Every offset in [start, start+length) whose 4 bytes equal the tag."""
    region = image[start : start + length]
    hits = set()
    pos = 0
    limit = len(region) - len(tag) + 1
    for pos in range(limit):
        if region[pos : pos + 4] == tag:
            hits.add(start + pos)
    return hits


def walk_ground_truth_list(machine: GuestMachine, head: int, flink_offset: int) -> list[int]:
    """Follow flink pointers straight out of the raw memory bytes."""
    nodes = []
    cur = struct.unpack_from("<Q", machine.memory, head + flink_offset)[0]
    hops = 0
    while cur != head:
        nodes.append(cur)
        cur = struct.unpack_from("<Q", machine.memory, cur + flink_offset)[0]
        hops += 1
        assert hops < 10_000, "runaway list"
    return nodes
