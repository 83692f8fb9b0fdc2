"""Exception hierarchy shared by all subsystems.

Every error carries a stable ``code`` string (the class name) so the console
and the HTTP API can report machine-readable failures without string parsing.
"""

from __future__ import annotations


class HybisError(Exception):
    """Base class for all errors raised by this package."""

    @property
    def code(self) -> str:
        return type(self).__name__


# --- guest simulator ---------------------------------------------------


class InvalidConfig(HybisError):
    """Guest or profile configuration violates an invariant."""


class OutOfRange(HybisError):
    """A memory range falls outside the address space."""


class NoSuchPid(HybisError):
    """The targeted process does not exist."""


class NotTerminated(HybisError):
    """Slot reuse was requested for an object that is still live."""


class KernelNotReady(HybisError):
    """An action requires the kernel to have finished initializing."""


# --- dump store --------------------------------------------------------


class IoFailure(HybisError):
    """An underlying file operation failed."""


class SourceUnavailable(HybisError):
    """The memory source cannot be read."""


class MissingBackupFile(HybisError):
    """A checkpoint backup file referenced by the manifest is gone."""


class SizeMismatch(HybisError):
    """A dump file's length does not match the recorded memory size."""


# --- introspection -----------------------------------------------------


class KernelDebugBlockNotFound(HybisError):
    """No kernel debug block signature in the scan region."""


class CorruptDebugBlock(HybisError):
    """Debug block signature found but its head pointers are invalid."""


class CycleDetected(HybisError):
    """List traversal revisited a node or exceeded the hop budget."""


class DanglingLink(HybisError):
    """A list link points outside the address space."""


# --- reactor -----------------------------------------------------------


class NotAProcessObject(HybisError):
    """The given address does not carry a valid process signature."""


class AlreadyUnlinked(HybisError):
    """The object is not reachable from the scheduling list head."""


class WriteFailed(HybisError):
    """A guest memory write could not be applied."""


# --- monitor / console -------------------------------------------------


class AlreadyBooted(HybisError):
    """A boot dump was armed after kernel initialization completed."""


class UnknownCommand(HybisError):
    """The console verb is not recognized."""


class BadArguments(HybisError):
    """Console or API arguments are malformed."""


class NoOpenSession(HybisError):
    """A session-only verb was used without an open session."""


class UnknownFinding(HybisError):
    """The finding does not exist or has already been resolved."""
