"""Operator command surface shared by the REPL and the HTTP API.

The seven console verbs map one-to-one onto the underlying operations.  In
session mode, list/update verbs work against the session's dump; without a
session (or when explicitly asked), a command gets its own temporary dump
that is discarded afterwards, leaving any open session untouched.
"""

from __future__ import annotations

import os
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path

from . import introspect
from .dumps import DumpManifest, dump_full, dump_update_range, manifest_path_for, open_dump
from .errors import (
    BadArguments,
    HybisError,
    NoOpenSession,
    UnknownCommand,
)
from .guest import GuestMachine
from .introspect import CrossViewReport, render_report
from .monitor import Monitor
from .profile import KernelProfile
from .reactor import block_process

SCRATCH_ENV = "HYBIS_SCRATCH"


@dataclass
class Session:
    id: int
    manifest: DumpManifest
    created_at_step: int
    open: bool = True

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "dump_path": self.manifest.base_path,
            "created_at_step": self.created_at_step,
            "checkpoints": len(self.manifest.checkpoints),
            "open": self.open,
        }


@dataclass
class CommandResult:
    status: str  # OK | ERROR
    human_text: str
    machine_payload: dict = field(default_factory=dict)
    error_code: str | None = None

    @classmethod
    def ok(cls, text: str, **payload) -> "CommandResult":
        return cls(status="OK", human_text=text, machine_payload=payload)

    @classmethod
    def error(cls, exc: Exception) -> "CommandResult":
        code = exc.code if isinstance(exc, HybisError) else type(exc).__name__
        return cls(status="ERROR", human_text=f"error [{code}]: {exc}", error_code=code)


def default_scratch_dir() -> Path:
    override = os.environ.get(SCRATCH_ENV)
    if override:
        return Path(override)
    return Path(tempfile.gettempdir()) / "hybis"


class ConsoleCore:
    """Session state plus the verb implementations, one guest per core."""

    def __init__(
        self,
        guest: GuestMachine,
        profile: KernelProfile | None = None,
        monitor: Monitor | None = None,
        scratch_dir: str | Path | None = None,
        keep_temp: bool = False,
    ):
        self.guest = guest
        self.profile = profile or guest.profile
        self.monitor = monitor or Monitor(guest, self.profile)
        self.port = guest.memory_source()
        self.scratch = Path(scratch_dir) if scratch_dir else default_scratch_dir()
        self.scratch.mkdir(parents=True, exist_ok=True)
        self.keep_temp = keep_temp
        self.session: Session | None = None
        self._session_counter = 0
        self._temp_counter = 0
        self._lock = threading.RLock()  # mutating verbs are serialized

    # -- helpers -----------------------------------------------------------

    def _temp_path(self) -> Path:
        self._temp_counter += 1
        return self.scratch / f"tmp-{os.getpid()}-{self._temp_counter}.dump"

    def _discard_temp(self, manifest: DumpManifest) -> None:
        if self.keep_temp:
            return
        for path in [manifest.base_path, manifest.manifest_path] + [
            backup for cp in manifest.checkpoints for _, _, backup in cp.ranges
        ]:
            try:
                os.unlink(path)
            except OSError:
                pass

    def _require_session(self) -> Session:
        if self.session is None or not self.session.open:
            raise NoOpenSession("no analysis session is open")
        return self.session

    # -- verbs ---------------------------------------------------------------

    def dumpmem(self, path: str | None = None) -> tuple[DumpManifest, str]:
        """Full raw dump to an explicit path (kept; not tied to a session)."""
        with self._lock:
            target = Path(path) if path else self.scratch / f"manual-{self.guest.clock}.dump"
            manifest = dump_full(self.port, target)
            return manifest, str(target)

    def dumprangediff(self, start: int, length: int):
        """Refresh one range of the session dump, creating a checkpoint."""
        with self._lock:
            session = self._require_session()
            return dump_update_range(session.manifest, (start, length), self.port)

    def setbootdump(self, path: str | None = None) -> str:
        with self._lock:
            target = str(Path(path) if path else self.scratch / "bootdump.dump")
            self.monitor.arm_boot_dump(target)
            return target

    def pslist(self, standalone: bool = False) -> CrossViewReport:
        """Cross-view process table from the session dump or a temporary one."""
        with self._lock:
            if self.session is not None and self.session.open and not standalone:
                with open_dump(self.session.manifest) as source:
                    return introspect.cross_view(
                        source,
                        self.profile,
                        source_description=(
                            f"session:{self.session.id} ckpt:{self.session.manifest.latest_id}"
                        ),
                    )
            temp = self._temp_path()
            manifest = dump_full(self.port, temp)
            try:
                with open_dump(manifest) as source:
                    return introspect.cross_view(
                        source, self.profile, source_description="standalone"
                    )
            finally:
                self._discard_temp(manifest)

    def psblock(self, address: int, unlink_tracking: bool = False):
        """Unlink the object at `address` from the live scheduling list."""
        with self._lock:
            kernel = introspect.locate_kernel(self.port, self.profile)
            return block_process(
                self.port, self.profile, kernel, address, unlink_tracking=unlink_tracking
            )

    def startsess(self) -> Session:
        with self._lock:
            if self.session is not None and self.session.open:
                raise BadArguments(
                    f"session {self.session.id} is already open; .stopsess first"
                )
            self._session_counter += 1
            path = self.scratch / f"session-{self._session_counter}.dump"
            manifest = dump_full(self.port, path)
            self.session = Session(
                id=self._session_counter,
                manifest=manifest,
                created_at_step=self.guest.clock,
            )
            return self.session

    def stopsess(self) -> Session:
        with self._lock:
            session = self._require_session()
            session.open = False
            return session

    def state(self) -> dict:
        return {
            "step": self.guest.clock,
            "cpu_mode": self.guest.cpu.mode.value,
            "kernel_ready": self.guest.kernel_ready,
            "policy": self.monitor.policy.mode.value,
            "session": self.session.to_json() if self.session else None,
            "pending_findings": [f.to_json() for f in self.monitor.pending_findings()],
        }

    def checkpoints(self) -> list[dict]:
        """Checkpoint timeline of the session and of every armed watch."""
        out: list[dict] = []
        manifests: list[tuple[str, DumpManifest]] = []
        if self.session is not None:
            manifests.append((f"session:{self.session.id}", self.session.manifest))
        for watch in self.monitor._watches.values():
            manifests.append((f"watch:{watch.id}", watch.spec.manifest))
        if self.monitor.boot_manifest is not None:
            manifests.append(("boot", self.monitor.boot_manifest))
        for label, manifest in manifests:
            for cp in manifest.checkpoints:
                out.append(
                    {
                        "source": label,
                        "dump_path": manifest.base_path,
                        "id": cp.id,
                        "source_step": cp.source_step,
                        "ranges": [
                            {"start": s, "length": l, "backup_path": p} for s, l, p in cp.ranges
                        ],
                    }
                )
        return out

    # -- command line dispatch ---------------------------------------------------

    def dispatch_command(self, line: str) -> CommandResult:
        """Parse and run one console line; errors come back as results."""
        tokens = line.strip().split()
        if not tokens:
            return CommandResult.ok("")
        verb, args = tokens[0], tokens[1:]
        try:
            return self._dispatch(verb, args)
        except HybisError as exc:
            return CommandResult.error(exc)

    def _dispatch(self, verb: str, args: list[str]) -> CommandResult:
        if verb == ".dumpmem":
            if len(args) > 1:
                raise BadArguments("usage: .dumpmem [path]")
            manifest, path = self.dumpmem(args[0] if args else None)
            return CommandResult.ok(
                f"dumped {manifest.memory_size} bytes to {path}",
                path=path,
                memory_size=manifest.memory_size,
                step=manifest.created_at_step,
            )
        if verb == ".dumprangediff":
            if len(args) != 2:
                raise BadArguments("usage: .dumprangediff <start> <length>")
            start, length = _parse_int(args[0]), _parse_int(args[1])
            checkpoint = self.dumprangediff(start, length)
            return CommandResult.ok(
                f"checkpoint {checkpoint.id} updated "
                f"[{start:#x}, {start + length:#x}) at step {checkpoint.source_step}",
                checkpoint=checkpoint.to_json(),
            )
        if verb == ".setbootdump":
            if len(args) > 1:
                raise BadArguments("usage: .setbootdump [path]")
            path = self.setbootdump(args[0] if args else None)
            return CommandResult.ok(f"boot dump armed -> {path}", path=path)
        if verb == ".pslist":
            standalone = False
            if args == ["standalone"]:
                standalone = True
            elif args:
                raise BadArguments("usage: .pslist [standalone]")
            report = self.pslist(standalone=standalone)
            return CommandResult.ok(render_report(report), report=report.to_json())
        if verb == ".psblock":
            if len(args) not in (1, 2) or (len(args) == 2 and args[1] != "track"):
                raise BadArguments("usage: .psblock <address> [track]")
            receipt = self.psblock(_parse_int(args[0]), unlink_tracking=len(args) == 2)
            return CommandResult.ok(
                f"blocked pid {receipt.target_pid} at {receipt.target_address:#x} "
                f"(verified={receipt.verified})",
                receipt=receipt.to_json(),
            )
        if verb == ".startsess":
            if args:
                raise BadArguments("usage: .startsess")
            session = self.startsess()
            return CommandResult.ok(
                f"session {session.id} open, dump {session.manifest.base_path}",
                session=session.to_json(),
            )
        if verb == ".stopsess":
            if args:
                raise BadArguments("usage: .stopsess")
            session = self.stopsess()
            return CommandResult.ok(f"session {session.id} closed", session=session.to_json())
        raise UnknownCommand(f"unknown command {verb!r}")


def _parse_int(token: str) -> int:
    try:
        return int(token, 0)  # accepts 0x-prefixed hex and decimal
    except ValueError as exc:
        raise BadArguments(f"not a number: {token!r}") from exc


HELP_TEXT = """\
commands:
  .dumpmem [path]                 write a full raw dump
  .dumprangediff <start> <len>    refresh a range of the session dump (checkpoint)
  .setbootdump [path]             arm the automatic boot dump
  .pslist [standalone]            compared-view process table
  .psblock <address> [track]      unlink a process from the scheduling list
  .startsess / .stopsess          open / close an analysis session
  help | quit
"""


def repl(core: ConsoleCore, input_fn=input, print_fn=print) -> None:
    """Interactive loop; reads verbs until EOF or quit."""
    while True:
        try:
            line = input_fn("hybis> ")
        except EOFError:
            break
        stripped = line.strip()
        if stripped in ("quit", "exit"):
            break
        if stripped in ("help", "?"):
            print_fn(HELP_TEXT)
            continue
        result = core.dispatch_command(line)
        if result.human_text:
            print_fn(result.human_text)
