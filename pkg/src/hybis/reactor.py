"""In-memory reaction: unlink a process object from the scheduling list.

The same four-pointer surgery rootkits use to hide is used here to stop one:
the victim's neighbors are rewired around it and its own links are pointed
at itself, so the guest scheduler simply never reaches it again.  Every
overwritten value is kept in the receipt, which makes a block auditable and,
in tests, reversible.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

from .errors import AlreadyUnlinked, NotAProcessObject, WriteFailed
from .introspect import KernelInfo, parse_object, walk_list
from .profile import U64, KernelProfile


@dataclass(frozen=True)
class LinkWrite:
    """One overwritten 8-byte link field: where it lived and what it held."""

    address: int
    value: int

    def to_json(self) -> dict:
        return {"address": self.address, "value": self.value}


@dataclass
class BlockReceipt:
    target_address: int
    target_pid: int
    step_applied: int
    prior_links: list[LinkWrite] = field(default_factory=list)
    verified: bool = False
    tracking_unlinked: bool = False

    def to_json(self) -> dict:
        return {
            "target_address": self.target_address,
            "target_pid": self.target_pid,
            "step_applied": self.step_applied,
            "prior_links": [w.to_json() for w in self.prior_links],
            "verified": self.verified,
            "tracking_unlinked": self.tracking_unlinked,
        }


def _unlink(writer, profile: KernelProfile, target: int, flink: str, blink: str) -> list[LinkWrite]:
    """Bypass target in one list and self-point its links; 32 bytes total."""
    flink_off = profile.offsets[flink]
    blink_off = profile.offsets[blink]
    nxt = U64.unpack_from(writer.read(target + flink_off, 8))[0]
    prev = U64.unpack_from(writer.read(target + blink_off, 8))[0]
    writes = [
        (prev + flink_off, nxt),    # predecessor now skips the target
        (nxt + blink_off, prev),    # successor back-links around it
        (target + flink_off, target),
        (target + blink_off, target),
    ]
    prior = []
    for address, value in writes:
        prior.append(LinkWrite(address, U64.unpack_from(writer.read(address, 8))[0]))
        try:
            writer.write(address, U64.pack(value))
        except Exception as exc:
            raise WriteFailed(f"link write at {address:#x} failed: {exc}") from exc
    return prior


def block_process(
    writer,
    profile: KernelProfile,
    kernel: KernelInfo,
    proc_address: int,
    unlink_tracking: bool = False,
) -> BlockReceipt:
    """Remove the object at proc_address from the scheduling list.

    The writer must expose read/write/size over live guest memory.  All
    reads and writes happen in one step-atomic section, so the surgery can
    never interleave with a scheduler pass.  With unlink_tracking the object
    is also removed from the tracking list (only meaningful for a visible
    process; hidden ones are already absent there).
    """
    transaction = getattr(writer, "transaction", None)
    ctx = transaction() if transaction is not None else contextlib.nullcontext()
    with ctx:
        obj = parse_object(writer, profile, proc_address)
        if not obj.tag_valid:
            raise NotAProcessObject(f"no process signature at {proc_address:#x}")
        sched_nodes = walk_list(writer, kernel.sched_head, profile.sched_flink_offset, profile)
        if proc_address not in sched_nodes:
            raise AlreadyUnlinked(f"{proc_address:#x} is not reachable from the scheduling head")

        receipt = BlockReceipt(
            target_address=proc_address,
            target_pid=obj.pid,
            step_applied=getattr(writer, "step", 0),
        )
        receipt.prior_links = _unlink(writer, profile, proc_address, "sched_flink", "sched_blink")

        if unlink_tracking:
            track_nodes = walk_list(
                writer, kernel.tracking_head, profile.track_flink_offset, profile
            )
            if proc_address in track_nodes:
                receipt.prior_links += _unlink(
                    writer, profile, proc_address, "track_flink", "track_blink"
                )
                receipt.tracking_unlinked = True

        receipt.verified = _verify_absent(writer, profile, kernel, proc_address)
    return receipt


def _verify_absent(writer, profile: KernelProfile, kernel: KernelInfo, target: int) -> bool:
    """Re-walk the scheduling list: target gone, cycle still well-formed."""
    try:
        nodes = walk_list(writer, kernel.sched_head, profile.sched_flink_offset, profile)
    except Exception:
        return False
    if target in nodes:
        return False
    flink_off = profile.offsets["sched_flink"]
    blink_off = profile.offsets["sched_blink"]
    for node in nodes + [kernel.sched_head]:
        nxt = U64.unpack_from(writer.read(node + flink_off, 8))[0]
        back = U64.unpack_from(writer.read(nxt + blink_off, 8))[0]
        if back != node:
            return False
    return True


def undo_block(writer, receipt: BlockReceipt) -> None:
    """Restore every overwritten link value; test and audit helper."""
    for prior in reversed(receipt.prior_links):
        writer.write(prior.address, U64.pack(prior.value))
