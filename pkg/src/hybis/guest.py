"""Deterministic simulated guest machine.

A flat physical memory hosts a miniature kernel with two doubly-linked
process lists (tracking and scheduling), a scripted boot timeline, a toy
scheduler that bumps a per-process tick counter by walking the scheduling
list in memory, and injectable rootkit behaviors.  The machine keeps an
internal ground-truth table so tests can check every byte the kernel wrote,
but nothing on the introspection side ever reads that table.
"""

from __future__ import annotations

import copy
import threading
from dataclasses import dataclass, field
from enum import Enum
from random import Random

from .errors import (
    InvalidConfig,
    KernelNotReady,
    NoSuchPid,
    NotTerminated,
    OutOfRange,
)
from .profile import (
    KDB_SCHED_HEAD_OFFSET,
    KDB_TRACK_HEAD_OFFSET,
    PAGE_SIZE,
    U32,
    U64,
    KernelProfile,
    default_profile,
)

SYSTEM_PID = 4
SYSTEM_NAME = "System"

LINK_FIELDS = ("track_flink", "track_blink", "sched_flink", "sched_blink")


class CpuMode(Enum):
    FIRMWARE = "FIRMWARE"
    PROTECTED = "PROTECTED"
    PAGED = "PAGED"


_MODE_ORDER = [CpuMode.FIRMWARE, CpuMode.PROTECTED, CpuMode.PAGED]


class ProcessState(Enum):
    INIT = 0
    RUNNING = 1
    TERMINATED = 2


class GuestEventKind(Enum):
    MODE_TRANSITION = "MODE_TRANSITION"
    KERNEL_INIT_DONE = "KERNEL_INIT_DONE"
    PROC_SPAWN = "PROC_SPAWN"
    PROC_EXIT = "PROC_EXIT"
    ROOTKIT_ACTION = "ROOTKIT_ACTION"


@dataclass(frozen=True)
class GuestEvent:
    step: int
    kind: GuestEventKind
    pid: int | None = None
    name: str | None = None
    old_mode: CpuMode | None = None
    new_mode: CpuMode | None = None
    action: str | None = None


class RootkitActionKind(Enum):
    HIDE = "HIDE"
    SPAWN_HIDDEN = "SPAWN_HIDDEN"
    TERMINATE = "TERMINATE"
    REUSE_SLOT = "REUSE_SLOT"


@dataclass(frozen=True)
class RootkitAction:
    """One injectable manipulation of kernel state.

    HIDE unlinks a live process from the tracking list only; SPAWN_HIDDEN
    creates a process that is never tracked; TERMINATE ends a process but
    leaves its object bytes in place; REUSE_SLOT zero-fills a terminated
    object's slot.
    """

    kind: RootkitActionKind
    pid: int | None = None
    name: str | None = None
    address: int | None = None

    @classmethod
    def hide(cls, pid: int) -> "RootkitAction":
        return cls(RootkitActionKind.HIDE, pid=pid)

    @classmethod
    def spawn_hidden(cls, name: str) -> "RootkitAction":
        return cls(RootkitActionKind.SPAWN_HIDDEN, name=name)

    @classmethod
    def terminate(cls, pid: int) -> "RootkitAction":
        return cls(RootkitActionKind.TERMINATE, pid=pid)

    @classmethod
    def reuse_slot(cls, address: int) -> "RootkitAction":
        return cls(RootkitActionKind.REUSE_SLOT, address=address)


@dataclass
class CpuState:
    mode: CpuMode = CpuMode.FIRMWARE
    step_of_last_transition: int = 0


# Boot-plan verbs.  Mode switches and kernel_init drive the boot phase;
# spawn/exit script normal process lifecycle; the rootkit verbs script
# injections so whole scenarios can live in one timeline file.
_PLAN_VERBS = {
    "protected",
    "paged",
    "kernel_init",
    "spawn",
    "exit",
    "hide",
    "spawn_hidden",
    "terminate",
    "reuse",
}

DEFAULT_BOOT_PLAN: list[tuple[int, str]] = [
    (2, "protected"),
    (4, "paged"),
    (6, "kernel_init"),
    (10, "spawn smss"),
    (14, "spawn csrss"),
    (18, "spawn wininit"),
    (22, "spawn services"),
    (26, "spawn lsass"),
]


def _parse_plan_entry(entry) -> tuple[int, str, str | None]:
    try:
        step, action = entry
        step = int(step)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"malformed boot_plan entry {entry!r}") from exc
    parts = str(action).split(None, 1)
    if not parts or parts[0] not in _PLAN_VERBS:
        raise InvalidConfig(f"unknown boot_plan action {action!r}")
    verb = parts[0]
    arg = parts[1] if len(parts) > 1 else None
    needs_arg = verb in {"spawn", "exit", "hide", "spawn_hidden", "terminate", "reuse"}
    if needs_arg and not arg:
        raise InvalidConfig(f"boot_plan action {verb!r} needs a process name")
    if not needs_arg and arg:
        raise InvalidConfig(f"boot_plan action {verb!r} takes no argument")
    return step, verb, arg


def _validate_plan(plan: list[tuple[int, str, str | None]]) -> None:
    """Static replay of the timeline: ordering and target names must work out."""
    last_step = 0
    mode_idx = 0
    kernel_ready = False
    # name -> list of states for processes spawned so far ("live", "hidden",
    # "dead"); targets resolve to the first matching entry, like at runtime.
    procs: list[list[str]] = []

    def find(name: str, want: set[str]) -> list[str] | None:
        for rec in procs:
            if rec[0] == name and rec[1] in want:
                return rec
        return None

    for step, verb, arg in plan:
        if step <= last_step:
            raise InvalidConfig("boot_plan steps must be strictly increasing")
        last_step = step
        if verb in ("protected", "paged"):
            want = CpuMode.PROTECTED if verb == "protected" else CpuMode.PAGED
            if _MODE_ORDER.index(want) != mode_idx + 1:
                raise InvalidConfig(f"mode action {verb!r} out of order")
            mode_idx += 1
        elif verb == "kernel_init":
            if mode_idx != 2:
                raise InvalidConfig("kernel_init requires PAGED mode")
            if kernel_ready:
                raise InvalidConfig("kernel_init appears twice")
            kernel_ready = True
            procs.append([SYSTEM_NAME, "live"])
        else:
            if not kernel_ready:
                raise InvalidConfig(f"{verb!r} scheduled before kernel_init")
            if verb in ("spawn", "spawn_hidden"):
                procs.append([arg, "hidden" if verb == "spawn_hidden" else "live"])
            elif verb == "hide":
                rec = find(arg, {"live"})
                if rec is None:
                    raise InvalidConfig(f"hide target {arg!r} is not live at step {step}")
                rec[1] = "hidden"
            elif verb in ("exit", "terminate"):
                rec = find(arg, {"live", "hidden"})
                if rec is None:
                    raise InvalidConfig(f"{verb} target {arg!r} is not live at step {step}")
                rec[1] = "dead"
            elif verb == "reuse":
                rec = find(arg, {"dead"})
                if rec is None:
                    raise InvalidConfig(f"reuse target {arg!r} is not terminated at step {step}")
                rec[1] = "reused"


@dataclass
class GuestConfig:
    memory_size: int = 64 * 1024 * 1024
    seed: int = 0
    boot_plan: list[tuple[int, str]] = field(default_factory=lambda: list(DEFAULT_BOOT_PLAN))
    profile: KernelProfile | None = None

    def resolved_profile(self) -> KernelProfile:
        return self.profile if self.profile is not None else default_profile(self.memory_size)

    def validate(self) -> list[tuple[int, str, str | None]]:
        if self.memory_size <= 0 or self.memory_size % PAGE_SIZE:
            raise InvalidConfig("memory_size must be a positive multiple of 4096")
        if self.seed < 0:
            raise InvalidConfig("seed must be a non-negative integer")
        profile = self.resolved_profile()
        profile.validate_bounds(self.memory_size)
        if profile.kdb_scan_region[1] < 3 * profile.alignment:
            raise InvalidConfig("kdb_scan_region too small for debug block and list heads")
        parsed = [_parse_plan_entry(e) for e in self.boot_plan]
        _validate_plan(parsed)
        return parsed

    @classmethod
    def from_json(cls, doc: dict) -> "GuestConfig":
        kwargs: dict = {}
        if "memory_size" in doc:
            kwargs["memory_size"] = int(doc["memory_size"])
        if "seed" in doc:
            kwargs["seed"] = int(doc["seed"])
        if "boot_plan" in doc:
            kwargs["boot_plan"] = [(int(s), str(a)) for s, a in doc["boot_plan"]]
        if "profile" in doc and doc["profile"] is not None:
            kwargs["profile"] = KernelProfile.from_json(doc["profile"])
        return cls(**kwargs)


@dataclass
class ProcDescriptor:
    """Ground-truth record for one kernel object, shadowing its memory bytes."""

    address: int
    pid: int
    name: str
    state: ProcessState
    ticks: int
    hidden: bool
    links: dict[str, int]
    spawned_step: int


@dataclass(frozen=True)
class GroundTruth:
    """Read-only snapshot of the machine's internal bookkeeping."""

    step: int
    processes: list[ProcDescriptor]
    tracking_order: list[int]
    sched_order: list[int]

    def by_pid(self, pid: int) -> ProcDescriptor | None:
        for proc in self.processes:
            if proc.pid == pid:
                return proc
        return None

    @property
    def live(self) -> list[ProcDescriptor]:
        return [p for p in self.processes if p.state != ProcessState.TERMINATED]

    @property
    def hidden_pids(self) -> set[int]:
        return {p.pid for p in self.live if p.hidden}

    @property
    def residue_addresses(self) -> set[int]:
        return {p.address for p in self.processes if p.state == ProcessState.TERMINATED}

    def pids_in(self, order: list[int]) -> list[int]:
        by_addr = {p.address: p.pid for p in self.processes}
        return [by_addr[a] for a in order if a in by_addr]


class GuestPort:
    """Read/write window onto guest memory with byte accounting.

    Reads and writes are serialized against step boundaries, so a single
    call always observes (or mutates) the state of exactly one step.
    """

    def __init__(self, machine: "GuestMachine"):
        self._machine = machine
        self.bytes_read = 0
        self.bytes_written = 0

    @property
    def size(self) -> int:
        return self._machine.memory_size

    @property
    def step(self) -> int:
        return self._machine.clock

    def read(self, start: int, length: int) -> bytes:
        data = self._machine.mem_access(start, length)
        self.bytes_read += length
        return data

    def write(self, start: int, data: bytes) -> None:
        self._machine.mem_access(start, len(data), write_bytes=data)
        self.bytes_written += len(data)

    def transaction(self):
        """Hold the step gate so a group of accesses lands between steps."""
        return self._machine._lock


class GuestMachine:
    """The introspection target: memory, CPU mode, clock, and kernel state."""

    def __init__(self, config: GuestConfig):
        plan = config.validate()
        self.config = config
        self.profile = config.resolved_profile()
        self.memory_size = config.memory_size
        self.memory = bytearray(config.memory_size)
        self.cpu = CpuState()
        self.clock = 0
        self.events: list[GuestEvent] = []
        self._plan = sorted(plan, key=lambda e: e[0])
        self._plan_pos = 0
        self._lock = threading.RLock()
        self._rng = Random(config.seed)

        self._descriptors: dict[int, ProcDescriptor] = {}
        self._tracking_order: list[int] = []
        self._sched_order: list[int] = []
        self._kernel_ready = False
        self._next_pid = SYSTEM_PID
        self._next_slot = 0

        # Firmware occupies the first page; everything else starts zeroed.
        self.memory[0:PAGE_SIZE] = self._rng.randbytes(PAGE_SIZE)

        # The debug block and the two sentinel heads get materialized at
        # kernel_init time, but their placement is fixed up front so the
        # whole run is a pure function of (config, injections, schedule).
        scan_start, scan_len = self.profile.kdb_scan_region
        align = self.profile.alignment
        slots = (scan_len - 3 * align) // align + 1
        self.kdb_address = scan_start + align * self._rng.randrange(slots)
        self.tracking_head = self.kdb_address + align
        self.sched_head = self.kdb_address + 2 * align

    # -- raw memory ------------------------------------------------------

    @classmethod
    def create(cls, config: GuestConfig) -> "GuestMachine":
        return cls(config)

    def mem_access(self, start: int, length: int, write_bytes: bytes | None = None) -> bytes:
        """Read or overwrite a range, atomically with respect to steps."""
        if start < 0 or length < 0 or start + length > self.memory_size:
            raise OutOfRange(f"range [{start:#x}, {start + length:#x}) outside memory")
        if write_bytes is not None and len(write_bytes) != length:
            raise OutOfRange("write_bytes length must equal the range length")
        with self._lock:
            if write_bytes is not None:
                self.memory[start : start + length] = write_bytes
                return bytes(write_bytes)
            return bytes(self.memory[start : start + length])

    def memory_source(self) -> GuestPort:
        return GuestPort(self)

    def _read_u64(self, addr: int) -> int:
        return U64.unpack_from(self.memory, addr)[0]

    def _write_u64(self, addr: int, value: int) -> None:
        U64.pack_into(self.memory, addr, value)

    def _read_u32(self, addr: int) -> int:
        return U32.unpack_from(self.memory, addr)[0]

    def _write_u32(self, addr: int, value: int) -> None:
        U32.pack_into(self.memory, addr, value & 0xFFFFFFFF)

    def _set_link(self, addr: int, link: str, value: int) -> None:
        """Write one link field, keeping the owner's shadow copy in sync."""
        self._write_u64(addr + self.profile.offsets[link], value)
        desc = self._descriptors.get(addr)
        if desc is not None:
            desc.links[link] = value

    # -- stepping --------------------------------------------------------

    def step(self, n: int) -> list[GuestEvent]:
        """Advance the clock by n steps, applying timeline actions in order."""
        if n < 1:
            raise InvalidConfig("step count must be >= 1")
        first = len(self.events)
        for _ in range(n):
            with self._lock:
                self.clock += 1
                while (
                    self._plan_pos < len(self._plan)
                    and self._plan[self._plan_pos][0] == self.clock
                ):
                    _, verb, arg = self._plan[self._plan_pos]
                    self._plan_pos += 1
                    self._apply_plan_action(verb, arg)
                if self._kernel_ready:
                    self._scheduler_tick()
        return self.events[first:]

    def _emit(self, kind: GuestEventKind, **kw) -> GuestEvent:
        event = GuestEvent(step=self.clock, kind=kind, **kw)
        self.events.append(event)
        return event

    def _apply_plan_action(self, verb: str, arg: str | None) -> None:
        if verb in ("protected", "paged"):
            new = CpuMode.PROTECTED if verb == "protected" else CpuMode.PAGED
            old = self.cpu.mode
            self.cpu.mode = new
            self.cpu.step_of_last_transition = self.clock
            self._emit(GuestEventKind.MODE_TRANSITION, old_mode=old, new_mode=new)
        elif verb == "kernel_init":
            self._kernel_init()
        elif verb == "spawn":
            pid = self._spawn(arg, hidden=False)
            self._emit(GuestEventKind.PROC_SPAWN, pid=pid, name=arg)
        elif verb == "exit":
            desc = self._live_by_name(arg)
            self._terminate(desc)
            self._emit(GuestEventKind.PROC_EXIT, pid=desc.pid, name=arg)
        else:
            action = self._plan_rootkit_action(verb, arg)
            self._apply_rootkit(action)

    def _plan_rootkit_action(self, verb: str, arg: str) -> RootkitAction:
        if verb == "spawn_hidden":
            return RootkitAction.spawn_hidden(arg)
        if verb == "hide":
            return RootkitAction.hide(self._live_by_name(arg).pid)
        if verb == "terminate":
            return RootkitAction.terminate(self._live_by_name(arg).pid)
        # reuse: first terminated object with this name
        for desc in self._descriptors.values():
            if desc.name == arg and desc.state == ProcessState.TERMINATED:
                return RootkitAction.reuse_slot(desc.address)
        raise NoSuchPid(f"no terminated object named {arg!r}")

    def _kernel_init(self) -> None:
        profile = self.profile
        kdb = bytearray(64)
        kdb[0:4] = profile.kdb_tag
        U64.pack_into(kdb, KDB_TRACK_HEAD_OFFSET, self.tracking_head)
        U64.pack_into(kdb, KDB_SCHED_HEAD_OFFSET, self.sched_head)
        self.memory[self.kdb_address : self.kdb_address + 64] = kdb
        # Sentinel heads: untagged nodes whose link fields form empty cycles.
        for head, links in (
            (self.tracking_head, ("track_flink", "track_blink")),
            (self.sched_head, ("sched_flink", "sched_blink")),
        ):
            for link in links:
                self._write_u64(head + profile.offsets[link], head)
        self._kernel_ready = True
        self._emit(GuestEventKind.KERNEL_INIT_DONE)
        # The kernel process itself comes alive in the same step.
        pid = self._spawn(SYSTEM_NAME, hidden=False, pid=SYSTEM_PID)
        self._emit(GuestEventKind.PROC_SPAWN, pid=pid, name=SYSTEM_NAME)

    def _scheduler_tick(self) -> None:
        """Walk the scheduling list in memory and bump each node's ticks."""
        profile = self.profile
        flink_off = profile.offsets["sched_flink"]
        ticks_off = profile.offsets["ticks"]
        budget = profile.pool_capacity() + 8
        cur = self._read_u64(self.sched_head + flink_off)
        while cur != self.sched_head and budget > 0:
            if cur < 0 or cur + profile.object_size > self.memory_size:
                break  # corrupted link; the walk just stops
            self._write_u32(cur + ticks_off, self._read_u32(cur + ticks_off) + 1)
            desc = self._descriptors.get(cur)
            if desc is not None:
                desc.ticks = (desc.ticks + 1) & 0xFFFFFFFF
            cur = self._read_u64(cur + flink_off)
            budget -= 1

    # -- kernel object plumbing -------------------------------------------

    def _alloc_slot(self) -> int:
        if self._next_slot >= self.profile.pool_capacity():
            raise OutOfRange("process pool exhausted")
        addr = self.profile.pool_region[0] + self._next_slot * self.profile.alignment
        self._next_slot += 1
        return addr

    def _spawn(self, name: str, hidden: bool, pid: int | None = None) -> int:
        profile = self.profile
        if pid is None:
            self._next_pid += 4 * self._rng.randint(1, 4)
            pid = self._next_pid
        addr = self._alloc_slot()
        obj = bytearray(profile.object_size)
        obj[0:4] = profile.proc_tag
        U32.pack_into(obj, profile.offsets["pid"], pid)
        U32.pack_into(obj, profile.offsets["state"], ProcessState.RUNNING.value)
        U32.pack_into(obj, profile.offsets["ticks"], 0)
        raw_name = name.encode("ascii", "replace")[: profile.name_length]
        obj[profile.offsets["name"] : profile.offsets["name"] + len(raw_name)] = raw_name
        self.memory[addr : addr + profile.object_size] = obj

        desc = ProcDescriptor(
            address=addr,
            pid=pid,
            name=name[: profile.name_length],
            state=ProcessState.RUNNING,
            ticks=0,
            hidden=hidden,
            links={k: 0 for k in LINK_FIELDS},
            spawned_step=self.clock,
        )
        self._descriptors[addr] = desc

        if hidden:
            # Never tracked: its tracking links point at itself.
            self._set_link(addr, "track_flink", addr)
            self._set_link(addr, "track_blink", addr)
        else:
            self._list_insert_tail(addr, self.tracking_head, "track_flink", "track_blink")
            self._tracking_order.append(addr)
        self._list_insert_tail(addr, self.sched_head, "sched_flink", "sched_blink")
        self._sched_order.append(addr)
        return pid

    def _list_insert_tail(self, addr: int, head: int, flink: str, blink: str) -> None:
        tail = self._read_u64(head + self.profile.offsets[blink])
        self._set_link(addr, flink, head)
        self._set_link(addr, blink, tail)
        self._set_link(tail, flink, addr)
        self._set_link(head, blink, addr)

    def _list_unlink(self, addr: int, flink: str, blink: str) -> None:
        """Repair the neighbors around addr; addr's own links are untouched."""
        prev = self._read_u64(addr + self.profile.offsets[blink])
        nxt = self._read_u64(addr + self.profile.offsets[flink])
        self._set_link(prev, flink, nxt)
        self._set_link(nxt, blink, prev)

    def _live_by_name(self, name: str) -> ProcDescriptor:
        for desc in self._descriptors.values():
            if desc.name == name and desc.state != ProcessState.TERMINATED:
                return desc
        raise NoSuchPid(f"no live process named {name!r}")

    def _live_by_pid(self, pid: int) -> ProcDescriptor:
        for desc in self._descriptors.values():
            if desc.pid == pid and desc.state != ProcessState.TERMINATED:
                return desc
        raise NoSuchPid(f"no live process with pid {pid}")

    def _terminate(self, desc: ProcDescriptor) -> None:
        if not desc.hidden:
            self._list_unlink(desc.address, "track_flink", "track_blink")
            self._tracking_order.remove(desc.address)
        if desc.address in self._sched_order:
            self._list_unlink(desc.address, "sched_flink", "sched_blink")
            self._sched_order.remove(desc.address)
        desc.state = ProcessState.TERMINATED
        self._write_u32(
            desc.address + self.profile.offsets["state"], ProcessState.TERMINATED.value
        )

    # -- injections --------------------------------------------------------

    def inject(self, action: RootkitAction) -> GuestEvent:
        """Apply a rootkit manipulation atomically between steps."""
        with self._lock:
            if not self._kernel_ready:
                raise KernelNotReady("kernel structures are not initialized yet")
            return self._apply_rootkit(action)

    def _apply_rootkit(self, action: RootkitAction) -> GuestEvent:
        kind = action.kind
        if kind == RootkitActionKind.HIDE:
            desc = self._live_by_pid(action.pid)
            if desc.hidden:
                raise NoSuchPid(f"pid {action.pid} is not in the tracking list")
            # DKOM-style unlink: repair the neighbors, then point the victim's
            # own tracking links at itself so the node stays crash-safe.
            self._list_unlink(desc.address, "track_flink", "track_blink")
            self._tracking_order.remove(desc.address)
            self._set_link(desc.address, "track_flink", desc.address)
            self._set_link(desc.address, "track_blink", desc.address)
            desc.hidden = True
            return self._emit(
                GuestEventKind.ROOTKIT_ACTION, action="HIDE", pid=desc.pid, name=desc.name
            )
        if kind == RootkitActionKind.SPAWN_HIDDEN:
            pid = self._spawn(action.name, hidden=True)
            return self._emit(
                GuestEventKind.ROOTKIT_ACTION, action="SPAWN_HIDDEN", pid=pid, name=action.name
            )
        if kind == RootkitActionKind.TERMINATE:
            desc = self._live_by_pid(action.pid)
            self._terminate(desc)
            return self._emit(
                GuestEventKind.ROOTKIT_ACTION, action="TERMINATE", pid=desc.pid, name=desc.name
            )
        if kind == RootkitActionKind.REUSE_SLOT:
            desc = self._descriptors.get(action.address)
            if desc is None:
                raise NoSuchPid(f"no kernel object at {action.address:#x}")
            if desc.state != ProcessState.TERMINATED:
                raise NotTerminated(f"object at {action.address:#x} is still live")
            self.memory[desc.address : desc.address + self.profile.object_size] = bytes(
                self.profile.object_size
            )
            del self._descriptors[desc.address]
            return self._emit(
                GuestEventKind.ROOTKIT_ACTION, action="REUSE_SLOT", pid=desc.pid, name=desc.name
            )
        raise InvalidConfig(f"unknown rootkit action {kind!r}")

    # -- ground truth -------------------------------------------------------

    @property
    def kernel_ready(self) -> bool:
        return self._kernel_ready

    def ground_truth(self) -> GroundTruth:
        """Snapshot of internal bookkeeping; test oracle only."""
        with self._lock:
            return GroundTruth(
                step=self.clock,
                processes=[copy.deepcopy(d) for d in self._descriptors.values()],
                tracking_order=list(self._tracking_order),
                sched_order=list(self._sched_order),
            )
