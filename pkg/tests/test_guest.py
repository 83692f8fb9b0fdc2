"""Guest simulator: boot, scheduler, injections, determinism, atomicity."""

from __future__ import annotations

import hashlib
import struct
import threading
from random import Random

import pytest

from conftest import (
    MIB,
    changed_offsets,
    make_machine,
    serialize_object,
    walk_ground_truth_list,
)
from hybis import (
    CpuMode,
    GuestConfig,
    GuestEventKind,
    GuestMachine,
    ProcessState,
    RootkitAction,
)
from hybis.errors import (
    InvalidConfig,
    KernelNotReady,
    NoSuchPid,
    NotTerminated,
    OutOfRange,
)
from hybis.profile import KernelProfile, default_profile


def mem_hash(machine: GuestMachine) -> str:
    return hashlib.sha256(machine.memory).hexdigest()


# -- creation ---------------------------------------------------------------


def test_fresh_machine_state(machine):
    assert machine.cpu.mode == CpuMode.FIRMWARE
    assert machine.clock == 0
    start, length = machine.profile.pool_region
    assert machine.mem_access(start, length) == bytes(length)
    # firmware page is seeded with non-zero content
    assert any(machine.mem_access(0, 4096))


def test_create_rejects_non_page_multiple():
    with pytest.raises(InvalidConfig):
        GuestMachine.create(GuestConfig(memory_size=1000))
    with pytest.raises(InvalidConfig):
        GuestMachine.create(GuestConfig(memory_size=0))


def test_create_rejects_bad_plans():
    bad_plans = [
        [(2, "protected"), (2, "paged")],  # not strictly increasing
        [(2, "warp")],  # unknown verb
        [(2, "protected"), (4, "spawn x")],  # spawn before kernel_init
        [(2, "paged")],  # paged before protected
        [(2, "protected"), (3, "paged"), (4, "kernel_init"), (5, "kernel_init")],
        [(2, "protected"), (3, "paged"), (4, "kernel_init"), (5, "hide ghost")],
    ]
    for plan in bad_plans:
        with pytest.raises(InvalidConfig):
            GuestMachine.create(GuestConfig(memory_size=2 * MIB, boot_plan=plan))


def test_profile_must_fit_memory():
    profile = default_profile(64 * MIB)  # pool sized for 64 MiB
    with pytest.raises(InvalidConfig):
        GuestMachine.create(GuestConfig(memory_size=2 * MIB, profile=profile))


def test_config_json_roundtrip():
    cfg = GuestConfig.from_json(
        {
            "memory_size": 2 * MIB,
            "seed": 3,
            "boot_plan": [[2, "protected"], [4, "paged"], [6, "kernel_init"]],
            "profile": default_profile(2 * MIB).to_json(),
        }
    )
    machine = GuestMachine.create(cfg)
    machine.step(10)
    assert machine.kernel_ready


# -- boot timeline -----------------------------------------------------------


def test_boot_event_order(machine):
    events = machine.step(30)
    kinds = [(e.kind, e.old_mode, e.new_mode, e.pid) for e in events]
    protected = kinds.index((GuestEventKind.MODE_TRANSITION, CpuMode.FIRMWARE, CpuMode.PROTECTED, None))
    paged = kinds.index((GuestEventKind.MODE_TRANSITION, CpuMode.PROTECTED, CpuMode.PAGED, None))
    init = kinds.index((GuestEventKind.KERNEL_INIT_DONE, None, None, None))
    system = kinds.index((GuestEventKind.PROC_SPAWN, None, None, 4))
    assert protected < paged < init < system
    assert events[system].name == "System"


def test_event_steps_nondecreasing(machine):
    events = machine.step(40)
    steps = [e.step for e in events]
    assert steps == sorted(steps)


def test_step_requires_positive_count(machine):
    with pytest.raises(InvalidConfig):
        machine.step(0)


def test_stepping_past_plan_only_advances_clock_and_ticks(booted):
    before = booted.clock
    events = booted.step(5)
    assert booted.clock == before + 5
    assert events == []  # plan exhausted: no lifecycle events, just ticks


# -- determinism ---------------------------------------------------------------


def test_identical_configs_are_byte_identical_each_step():
    a = make_machine(seed=11)
    b = make_machine(seed=11)
    script = {33: RootkitAction.hide(8), 36: RootkitAction.terminate(16)}
    for _ in range(45):
        a.step(1)
        b.step(1)
        if a.clock in script:
            a.inject(script[a.clock])
            b.inject(script[b.clock])
        assert mem_hash(a) == mem_hash(b), f"diverged at step {a.clock}"


def test_different_seeds_differ():
    a = make_machine(seed=1)
    b = make_machine(seed=2)
    a.step(10)
    b.step(10)
    assert mem_hash(a) != mem_hash(b)


# -- scheduler ------------------------------------------------------------------


def read_ticks(machine: GuestMachine, address: int) -> int:
    off = machine.profile.offsets["ticks"]
    return struct.unpack_from("<I", machine.memory, address + off)[0]


def test_ticks_advance_per_step_for_scheduled(booted):
    gt = booted.ground_truth()
    before = {p.address: read_ticks(booted, p.address) for p in gt.live}
    booted.step(100)
    for address, t0 in before.items():
        assert read_ticks(booted, address) == t0 + 100


def test_hidden_process_still_ticks(booted):
    booted.inject(RootkitAction.hide(8))
    target = booted.ground_truth().by_pid(8)
    t0 = read_ticks(booted, target.address)
    booted.step(50)
    assert read_ticks(booted, target.address) == t0 + 50


def test_terminated_process_stops_ticking(booted):
    target = booted.ground_truth().by_pid(8)
    booted.inject(RootkitAction.terminate(8))
    t0 = read_ticks(booted, target.address)
    booted.step(50)
    assert read_ticks(booted, target.address) == t0


# -- injections -------------------------------------------------------------------


def test_hide_removes_from_tracking_only(booted):
    profile = booted.profile
    booted.inject(RootkitAction.hide(8))
    gt = booted.ground_truth()
    target = gt.by_pid(8)
    track = walk_ground_truth_list(booted, booted.tracking_head, profile.offsets["track_flink"])
    sched = walk_ground_truth_list(booted, booted.sched_head, profile.offsets["sched_flink"])
    assert target.address not in track
    assert target.address in sched
    assert gt.hidden_pids == {8}


def test_hide_changes_exactly_four_link_fields(booted):
    profile = booted.profile
    before = bytes(booted.memory)
    gt = booted.ground_truth()
    target = gt.by_pid(8)
    idx = gt.tracking_order.index(target.address)
    prev_addr = gt.tracking_order[idx - 1] if idx else booted.tracking_head
    next_addr = (
        gt.tracking_order[idx + 1] if idx + 1 < len(gt.tracking_order) else booted.tracking_head
    )
    booted.inject(RootkitAction.hide(8))
    after = bytes(booted.memory)
    allowed = set()
    for base, field in (
        (prev_addr, "track_flink"),
        (next_addr, "track_blink"),
        (target.address, "track_flink"),
        (target.address, "track_blink"),
    ):
        start = base + profile.offsets[field]
        allowed |= set(range(start, start + 8))
    diff = changed_offsets(before, after)
    assert diff, "hide must write something"
    assert diff <= allowed, "hide touched bytes outside the four link fields"


def test_spawn_hidden_never_tracked(booted):
    booted.inject(RootkitAction.spawn_hidden("ghost"))
    gt = booted.ground_truth()
    ghost = next(p for p in gt.processes if p.name == "ghost")
    assert ghost.hidden
    track = walk_ground_truth_list(
        booted, booted.tracking_head, booted.profile.offsets["track_flink"]
    )
    sched = walk_ground_truth_list(booted, booted.sched_head, booted.profile.offsets["sched_flink"])
    assert ghost.address not in track
    assert ghost.address in sched


def test_terminate_leaves_residue_bytes(booted):
    profile = booted.profile
    target = booted.ground_truth().by_pid(8)
    obj_before = booted.mem_access(target.address, profile.object_size)
    booted.inject(RootkitAction.terminate(8))
    obj_after = booted.mem_access(target.address, profile.object_size)
    assert obj_after[0:4] == profile.proc_tag
    pid_off = profile.offsets["pid"]
    name_off = profile.offsets["name"]
    assert obj_after[pid_off : pid_off + 4] == obj_before[pid_off : pid_off + 4]
    assert obj_after[name_off : name_off + profile.name_length] == (
        obj_before[name_off : name_off + profile.name_length]
    )
    # the object's own links are stale residue, not rewritten
    for link in ("track_flink", "track_blink", "sched_flink", "sched_blink"):
        off = profile.offsets[link]
        assert obj_after[off : off + 8] == obj_before[off : off + 8]
    state = struct.unpack_from("<I", obj_after, profile.offsets["state"])[0]
    assert state == ProcessState.TERMINATED.value


def test_reuse_slot_zero_fills(booted):
    target = booted.ground_truth().by_pid(8)
    booted.inject(RootkitAction.terminate(8))
    booted.inject(RootkitAction.reuse_slot(target.address))
    assert booted.mem_access(target.address, booted.profile.object_size) == bytes(
        booted.profile.object_size
    )
    assert booted.ground_truth().by_pid(8) is None


def test_injection_errors(machine, booted):
    with pytest.raises(KernelNotReady):
        machine.inject(RootkitAction.hide(4))
    with pytest.raises(NoSuchPid):
        booted.inject(RootkitAction.hide(999))
    with pytest.raises(NoSuchPid):
        booted.inject(RootkitAction.terminate(999))
    live = booted.ground_truth().by_pid(8)
    with pytest.raises(NotTerminated):
        booted.inject(RootkitAction.reuse_slot(live.address))
    with pytest.raises(NoSuchPid):
        booted.inject(RootkitAction.reuse_slot(0x123400))
    booted.inject(RootkitAction.hide(8))
    with pytest.raises(NoSuchPid):
        booted.inject(RootkitAction.hide(8))  # already unlinked from tracking


# -- raw memory access --------------------------------------------------------------


def test_mem_access_read_write_roundtrip(booted):
    addr = booted.profile.pool_region[0] + 17
    payload = b"\xde\xad\xbe\xef\x00\x11\x22\x33"
    booted.mem_access(addr, len(payload), write_bytes=payload)
    assert booted.mem_access(addr, len(payload)) == payload


def test_mem_access_bounds(booted):
    with pytest.raises(OutOfRange):
        booted.mem_access(booted.memory_size - 4, 8)
    with pytest.raises(OutOfRange):
        booted.mem_access(-1, 4)
    with pytest.raises(OutOfRange):
        booted.mem_access(0, 8, write_bytes=b"\x00" * 4)


def test_snapshot_is_step_atomic():
    """A full read taken mid-burst equals the memory of one whole step."""
    reference = make_machine(seed=23)
    step_hashes = {mem_hash(reference)}
    for _ in range(60):
        reference.step(1)
        step_hashes.add(mem_hash(reference))

    machine = make_machine(seed=23)
    port = machine.memory_source()
    snapshots: list[bytes] = []

    def reader():
        for _ in range(40):
            snapshots.append(port.read(0, machine.memory_size))

    thread = threading.Thread(target=reader)
    thread.start()
    machine.step(60)
    thread.join()
    for snap in snapshots:
        digest = hashlib.sha256(snap).hexdigest()
        assert digest in step_hashes, "torn read: snapshot matches no single step"


# -- ground truth as oracle ------------------------------------------------------------


def scenario_with_everything() -> GuestMachine:
    m = make_machine()
    m.step(30)
    m.inject(RootkitAction.hide(8))
    m.inject(RootkitAction.spawn_hidden("implant"))
    m.inject(RootkitAction.terminate(16))
    m.step(10)
    return m


def test_ground_truth_reserializes_to_memory_bytes():
    m = scenario_with_everything()
    profile = m.profile
    for desc in m.ground_truth().processes:
        expected = serialize_object(desc, profile)
        actual = m.mem_access(desc.address, profile.object_size)
        assert actual == expected, f"mismatch for pid {desc.pid} at {desc.address:#x}"


def test_ground_truth_orders_match_memory_walks():
    m = scenario_with_everything()
    profile = m.profile
    gt = m.ground_truth()
    assert (
        walk_ground_truth_list(m, m.tracking_head, profile.offsets["track_flink"])
        == gt.tracking_order
    )
    assert walk_ground_truth_list(m, m.sched_head, profile.offsets["sched_flink"]) == gt.sched_order


def test_lists_are_well_formed_cycles():
    m = scenario_with_everything()
    profile = m.profile
    for head, flink, blink in (
        (m.tracking_head, "track_flink", "track_blink"),
        (m.sched_head, "sched_flink", "sched_blink"),
    ):
        nodes = [head] + walk_ground_truth_list(m, head, profile.offsets[flink])
        for node in nodes:
            nxt = struct.unpack_from("<Q", m.memory, node + profile.offsets[flink])[0]
            back = struct.unpack_from("<Q", m.memory, nxt + profile.offsets[blink])[0]
            assert back == node, f"flink/blink mismatch at {node:#x}"


def test_random_action_sequences_keep_invariants():
    """Seeded pseudo-random scenarios preserve well-formedness and shadows."""
    for seed in range(6):
        rng = Random(1000 + seed)
        m = make_machine(seed=seed)
        m.step(30)
        for _ in range(12):
            gt = m.ground_truth()
            candidates = [p for p in gt.live if p.pid != 4]
            op = rng.choice(["hide", "spawn_hidden", "terminate", "reuse", "step"])
            try:
                if op == "hide" and candidates:
                    visible = [p for p in candidates if not p.hidden]
                    if visible:
                        m.inject(RootkitAction.hide(rng.choice(visible).pid))
                elif op == "spawn_hidden":
                    m.inject(RootkitAction.spawn_hidden(f"mal{rng.randrange(100)}"))
                elif op == "terminate" and candidates:
                    m.inject(RootkitAction.terminate(rng.choice(candidates).pid))
                elif op == "reuse":
                    residues = sorted(gt.residue_addresses)
                    if residues:
                        m.inject(RootkitAction.reuse_slot(rng.choice(residues)))
                else:
                    m.step(rng.randint(1, 5))
            except NoSuchPid:
                pass
            test_ok = True
            for desc in m.ground_truth().processes:
                assert m.mem_access(desc.address, m.profile.object_size) == serialize_object(
                    desc, m.profile
                )
            assert test_ok
