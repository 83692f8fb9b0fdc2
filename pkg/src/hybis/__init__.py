"""Closed-loop guest memory introspection lab.

A deterministic simulated guest machine, a differential memory dumper,
profile-driven process carving with cross-view comparison, an in-memory
process blocker, a closed-loop monitor, and an operator console (REPL +
JSON-over-HTTP API).
"""

from .dumps import (
    BufferSource,
    Checkpoint,
    DumpManifest,
    FileSource,
    MemorySource,
    diff_checkpoints,
    dump_full,
    dump_update_range,
    load_manifest,
    open_dump,
    reconstruct,
)
from .guest import (
    CpuMode,
    CpuState,
    GroundTruth,
    GuestConfig,
    GuestEvent,
    GuestEventKind,
    GuestMachine,
    GuestPort,
    ProcessState,
    RootkitAction,
    RootkitActionKind,
)
from .introspect import (
    Classification,
    CrossViewReport,
    KernelInfo,
    ProcessRecord,
    classify,
    cross_view,
    locate_kernel,
    render_report,
    scan_processes,
    walk_list,
)
from .monitor import (
    Finding,
    Monitor,
    MonitorEvent,
    MonitorEventKind,
    PolicyMode,
    ReactionPolicy,
    WatchSpec,
    events_to_jsonl,
)
from .profile import KernelProfile, default_profile
from .reactor import BlockReceipt, block_process, undo_block

__version__ = "0.1.0"

__all__ = [
    "BlockReceipt",
    "BufferSource",
    "Checkpoint",
    "Classification",
    "CpuMode",
    "CpuState",
    "CrossViewReport",
    "DumpManifest",
    "FileSource",
    "Finding",
    "GroundTruth",
    "GuestConfig",
    "GuestEvent",
    "GuestEventKind",
    "GuestMachine",
    "GuestPort",
    "KernelInfo",
    "KernelProfile",
    "MemorySource",
    "Monitor",
    "MonitorEvent",
    "MonitorEventKind",
    "PolicyMode",
    "ProcessRecord",
    "ProcessState",
    "ReactionPolicy",
    "RootkitAction",
    "RootkitActionKind",
    "WatchSpec",
    "block_process",
    "classify",
    "cross_view",
    "default_profile",
    "diff_checkpoints",
    "dump_full",
    "dump_update_range",
    "events_to_jsonl",
    "load_manifest",
    "locate_kernel",
    "open_dump",
    "reconstruct",
    "render_report",
    "scan_processes",
    "undo_block",
    "walk_list",
]
