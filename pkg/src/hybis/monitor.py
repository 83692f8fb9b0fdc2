"""Closed-loop controller: monitor, analyze, react.

The monitor drives the guest clock and hangs work off step boundaries.  A
boot-dump trigger probes each step after the CPU reaches paged mode and
writes a full dump at the first step that is actually analyzable.  Watches
refresh a dump range every period; when the refresh changed anything, the
updated dump (never the live guest) is analyzed, and hidden-process findings
either get blocked on the spot or queue up for an external evaluator.
Component failures become ERROR events; the loop itself never stops.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from . import introspect
from .dumps import DumpManifest, Range, diff_checkpoints, dump_update_range, dump_full, open_dump
from .errors import (
    HybisError,
    InvalidConfig,
    KernelDebugBlockNotFound,
    OutOfRange,
    UnknownFinding,
)
from .guest import SYSTEM_NAME, CpuMode, GuestMachine
from .introspect import Classification, CrossViewReport, ProcessRecord
from .profile import KernelProfile
from .reactor import BlockReceipt, block_process


class PolicyMode(Enum):
    AUTO_BLOCK = "AUTO_BLOCK"
    DEFER_TO_EVALUATOR = "DEFER_TO_EVALUATOR"


@dataclass(frozen=True)
class ReactionPolicy:
    mode: PolicyMode = PolicyMode.AUTO_BLOCK


class MonitorEventKind(Enum):
    BOOT_DUMP_WRITTEN = "BOOT_DUMP_WRITTEN"
    RANGE_CHANGED = "RANGE_CHANGED"
    FINDING = "FINDING"
    BLOCK_APPLIED = "BLOCK_APPLIED"
    ERROR = "ERROR"


@dataclass(frozen=True)
class MonitorEvent:
    id: int
    step: int
    kind: MonitorEventKind
    payload: dict

    def to_json(self) -> dict:
        return {"id": self.id, "step": self.step, "kind": self.kind.value, **self.payload}


def events_to_jsonl(events: list[MonitorEvent]) -> str:
    return "\n".join(json.dumps(e.to_json()) for e in events)


@dataclass
class WatchSpec:
    range: Range
    period: int
    manifest: DumpManifest


@dataclass
class Finding:
    id: int
    record: ProcessRecord
    classification: Classification
    checkpoint_id: int
    recommended_action: str  # BLOCK | OBSERVE
    status: str = "PENDING"  # PENDING | BLOCKED | OBSERVED | FAILED

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "record": self.record.to_json(),
            "classification": self.classification.value,
            "checkpoint_id": self.checkpoint_id,
            "recommended_action": self.recommended_action,
            "status": self.status,
        }


@dataclass
class _Watch:
    id: int
    spec: WatchSpec
    next_due: int


class Monitor:
    """One controller per guest; owns the event stream and the findings."""

    def __init__(
        self,
        guest: GuestMachine,
        profile: KernelProfile | None = None,
        policy: ReactionPolicy | None = None,
    ):
        self.guest = guest
        self.profile = profile or guest.profile
        self.policy = policy or ReactionPolicy()
        self.port = guest.memory_source()
        self.events: list[MonitorEvent] = []
        self.findings: dict[int, Finding] = {}
        self._watches: dict[int, _Watch] = {}
        self._next_watch_id = 1
        self._next_finding_id = 1
        self._events_cond = threading.Condition()
        self._boot_dump_path: str | None = None
        self._boot_dump_fired = False
        self._pending_watches: list[tuple[Range, int, str]] = []
        self.boot_manifest: DumpManifest | None = None
        self._runner: threading.Thread | None = None
        self._stop = threading.Event()

    # -- event plumbing ----------------------------------------------------

    def _emit(self, kind: MonitorEventKind, **payload) -> MonitorEvent:
        with self._events_cond:
            event = MonitorEvent(
                id=len(self.events) + 1, step=self.guest.clock, kind=kind, payload=payload
            )
            self.events.append(event)
            self._events_cond.notify_all()
        return event

    def events_since(self, since_id: int, timeout: float = 0.0) -> list[MonitorEvent]:
        """Events with id > since_id, waiting up to timeout for new ones."""
        with self._events_cond:
            if timeout > 0 and not any(e.id > since_id for e in self.events):
                self._events_cond.wait_for(
                    lambda: any(e.id > since_id for e in self.events), timeout=timeout
                )
            return [e for e in self.events if e.id > since_id]

    def _error(self, context: str, exc: Exception) -> None:
        code = exc.code if isinstance(exc, HybisError) else type(exc).__name__
        self._emit(MonitorEventKind.ERROR, context=context, error=code, message=str(exc))

    # -- configuration -----------------------------------------------------

    def arm_boot_dump(self, path: str | Path) -> None:
        """Dump automatically at the first analyzable step of the boot.

        Armed too late (the kernel is already up) it degrades to an
        immediate dump flagged as late rather than failing silently.
        """
        self._boot_dump_path = str(path)
        if self._kernel_locatable():
            self._write_boot_dump(late=True)

    def watch_range(self, spec: WatchSpec) -> int:
        start, length = spec.range
        if start < 0 or length <= 0 or start + length > self.guest.memory_size:
            raise OutOfRange(f"watch range [{start:#x}, {start + length:#x}) outside memory")
        if spec.period < 1:
            raise InvalidConfig("watch period must be >= 1")
        watch_id = self._next_watch_id
        self._next_watch_id += 1
        self._watches[watch_id] = _Watch(watch_id, spec, next_due=self.guest.clock + spec.period)
        return watch_id

    def watch_range_when_ready(self, rng: Range, period: int, base_path: str | Path) -> None:
        """Arm a watch whose base dump waits for the kernel to come up.

        A base image taken before kernel init could never be analyzed (range
        updates refresh only the watched range, not the debug block), so the
        full dump that seeds the manifest is deferred to the first step where
        the kernel is locatable.
        """
        start, length = rng
        if start < 0 or length <= 0 or start + length > self.guest.memory_size:
            raise OutOfRange(f"watch range [{start:#x}, {start + length:#x}) outside memory")
        if period < 1:
            raise InvalidConfig("watch period must be >= 1")
        self._pending_watches.append((rng, period, str(base_path)))
        self._activate_ready_watches()

    # -- the loop ------------------------------------------------------------

    def run(self, steps: int) -> list[MonitorEvent]:
        """Advance the guest by `steps`, doing monitor work after each step."""
        first = len(self.events)
        for _ in range(steps):
            self.guest.step(1)
            self._after_step()
        return self.events[first:]

    def run_loop(self, steps: int):
        """Generator form of run(): yields events as they appear."""
        seen = len(self.events)
        for _ in range(steps):
            self.guest.step(1)
            self._after_step()
            while seen < len(self.events):
                yield self.events[seen]
                seen += 1

    def start_background(self, step_interval: float = 0.005) -> None:
        """Step the guest continuously on a worker thread (service mode)."""
        if self._runner is not None:
            return
        self._stop.clear()

        def loop() -> None:
            while not self._stop.is_set():
                try:
                    self.run(1)
                except Exception as exc:  # pragma: no cover - last-ditch guard
                    self._error("background", exc)
                time.sleep(step_interval)

        self._runner = threading.Thread(target=loop, name="hybis-monitor", daemon=True)
        self._runner.start()

    def stop_background(self) -> None:
        if self._runner is None:
            return
        self._stop.set()
        self._runner.join()
        self._runner = None

    def _after_step(self) -> None:
        if self._boot_dump_path and not self._boot_dump_fired:
            try:
                self._boot_probe()
            except Exception as exc:
                self._error("boot_dump", exc)
        if self._pending_watches:
            try:
                self._activate_ready_watches()
            except Exception as exc:
                self._error("watch_activation", exc)
        for watch in list(self._watches.values()):
            if self.guest.clock < watch.next_due:
                continue
            watch.next_due += watch.spec.period
            try:
                self._checkpoint_watch(watch)
            except Exception as exc:
                self._error(f"watch:{watch.id}", exc)

    def _activate_ready_watches(self) -> None:
        if not self._kernel_locatable():
            return
        pending, self._pending_watches = self._pending_watches, []
        for rng, period, base_path in pending:
            manifest = dump_full(self.port, base_path)
            self.watch_range(WatchSpec(range=rng, period=period, manifest=manifest))

    def _kernel_locatable(self) -> bool:
        try:
            introspect.locate_kernel(self.port, self.profile)
            return True
        except KernelDebugBlockNotFound:
            return False

    # -- boot dump -----------------------------------------------------------

    def _boot_probe(self) -> None:
        """Fire the boot dump at the first step a forensic pass can succeed."""
        if self.guest.cpu.mode != CpuMode.PAGED:
            return
        try:
            introspect.locate_kernel(self.port, self.profile)
        except KernelDebugBlockNotFound:
            return  # nothing to analyze yet; keep probing
        hits = introspect.scan_processes(self.port, self.profile)
        if not any(obj.name == SYSTEM_NAME for obj in hits):
            return
        self._write_boot_dump(late=False)

    def _write_boot_dump(self, late: bool) -> None:
        self.boot_manifest = dump_full(self.port, self._boot_dump_path)
        self._boot_dump_fired = True
        self._emit(
            MonitorEventKind.BOOT_DUMP_WRITTEN,
            path=self._boot_dump_path,
            trigger_step=self.guest.clock,
            late=late,
        )

    # -- watches and analysis --------------------------------------------------

    def _checkpoint_watch(self, watch: _Watch) -> None:
        manifest = watch.spec.manifest
        previous_id = manifest.latest_id
        checkpoint = dump_update_range(manifest, watch.spec.range, self.port)
        changed = diff_checkpoints(manifest, previous_id, checkpoint.id, watch.spec.range)
        if not changed:
            return
        self._emit(
            MonitorEventKind.RANGE_CHANGED,
            watch_id=watch.id,
            checkpoint_id=checkpoint.id,
            changed=[[s, l] for s, l in changed],
        )
        self._analyze(manifest, checkpoint.id)

    def _analyze(self, manifest: DumpManifest, checkpoint_id: int) -> None:
        with open_dump(manifest) as source:
            report = introspect.cross_view(source, self.profile)
        self._raise_findings(report, checkpoint_id)

    def _raise_findings(self, report: CrossViewReport, checkpoint_id: int) -> None:
        for record in report.records:
            if record.classification == Classification.HIDDEN:
                recommended = "BLOCK"
            elif record.classification in (
                Classification.UNSCHEDULED_ANOMALY,
                Classification.CORRUPT_ENTRY,
            ):
                recommended = "OBSERVE"
            else:
                continue
            if self._already_raised(record.address, record.classification):
                continue
            finding = Finding(
                id=self._next_finding_id,
                record=record,
                classification=record.classification,
                checkpoint_id=checkpoint_id,
                recommended_action=recommended,
            )
            self._next_finding_id += 1
            self.findings[finding.id] = finding
            self._emit(MonitorEventKind.FINDING, finding=finding.to_json())
            if self.policy.mode == PolicyMode.AUTO_BLOCK:
                if recommended == "BLOCK":
                    self._apply_block(finding)
                else:
                    finding.status = "OBSERVED"

    def _already_raised(self, address: int, classification: Classification) -> bool:
        for finding in self.findings.values():
            if (
                finding.record.address == address
                and finding.classification == classification
                and finding.status in ("PENDING", "OBSERVED", "BLOCKED")
            ):
                return True
        return False

    # -- reaction ---------------------------------------------------------------

    def _apply_block(self, finding: Finding) -> BlockReceipt | None:
        try:
            kernel = introspect.locate_kernel(self.port, self.profile)
            receipt = block_process(self.port, self.profile, kernel, finding.record.address)
        except Exception as exc:
            finding.status = "FAILED"
            self._error(f"block:finding.{finding.id}", exc)
            return None
        finding.status = "BLOCKED"
        self._emit(
            MonitorEventKind.BLOCK_APPLIED, finding_id=finding.id, receipt=receipt.to_json()
        )
        return receipt

    def pending_findings(self) -> list[Finding]:
        return [f for f in self.findings.values() if f.status == "PENDING"]

    def decide(self, finding_id: int, action: str) -> Finding:
        """Evaluator decision for a pending finding; duplicates are rejected."""
        finding = self.findings.get(finding_id)
        if finding is None:
            raise UnknownFinding(f"no finding {finding_id}")
        if finding.status != "PENDING":
            raise UnknownFinding(f"finding {finding_id} already resolved ({finding.status})")
        if action == "BLOCK":
            self._apply_block(finding)
        elif action == "OBSERVE":
            finding.status = "OBSERVED"
        else:
            raise InvalidConfig(f"unknown decision action {action!r}")
        return finding
