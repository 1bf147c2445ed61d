"""Per-client VB tables, permission checks, and the CVT cache.

Every access names a VB through a small per-client table index; the
check validates the index, the entry, the RWX permission, and the
offset bound, then concatenates the stored VBUID with the offset to
form the block address.  A 64-slot direct-mapped cache front-ends the
table and is kept write-through coherent on attach/detach.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .addrspace import Vbuid, encode
from .registry import LifecycleError
from .stats import Stats

PERM_R, PERM_W, PERM_X = 4, 2, 1
_KIND_BIT = {"r": PERM_R, "read": PERM_R, "w": PERM_W, "write": PERM_W,
             "x": PERM_X, "execute": PERM_X}

MAX_CVT_ENTRIES = 4096  # per-client growth cap


def parse_rwx(text: str) -> int:
    perms = 0
    for ch, bit in (("r", PERM_R), ("w", PERM_W), ("x", PERM_X)):
        if ch in text:
            perms |= bit
    return perms


def rwx_str(perms: int) -> str:
    return (("r" if perms & PERM_R else "-")
            + ("w" if perms & PERM_W else "-")
            + ("x" if perms & PERM_X else "-"))


class ProtectionFault(Exception):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code  # bounds | perm | invalid_entry | index_range


@dataclass
class CVTEntry:
    valid: bool
    vbuid: Vbuid
    perms: int


@dataclass
class ClientTable:
    client: int
    entries: list[CVTEntry] = field(default_factory=list)

    def find(self, vbuid: Vbuid) -> int | None:
        for i, e in enumerate(self.entries):
            if e.valid and e.vbuid == vbuid:
                return i
        return None


class CVTCache:
    """64-slot direct-mapped cache over CVT indices, tagged with the
    owning client so context switches show up as conflicts."""

    SLOTS = 64

    def __init__(self, stats: Stats):
        self.stats = stats
        self.tags: list[tuple[int, int] | None] = [None] * self.SLOTS
        self.hits = 0
        self.misses = 0

    def access(self, client: int, index: int) -> bool:
        slot = index % self.SLOTS
        tag = (client, index)
        if self.tags[slot] == tag:
            self.hits += 1
            self.stats.bump("cvt_cache.hit")
            return True
        self.tags[slot] = tag
        self.misses += 1
        self.stats.bump("cvt_cache.miss")
        return False

    def hit_rate_after_warmup(self) -> float:
        """Hit rate ignoring the compulsory first touch of each slot."""
        warm = self.hits + self.misses - len([t for t in self.tags if t is not None])
        return self.hits / warm if warm > 0 else 0.0


class ProtectionUnit:
    def __init__(self, registry, stats: Stats):
        self.registry = registry
        self.stats = stats
        self.tables: dict[int, ClientTable] = {}
        self.cvt_cache = CVTCache(stats)

    def table(self, client: int) -> ClientTable:
        t = self.tables.get(client)
        if t is None:
            if client >= 1 << 16:
                raise LifecycleError(f"client id {client} exceeds 16 bits")
            t = ClientTable(client)
            self.tables[client] = t
        return t

    def attach(self, client: int, vbuid: Vbuid, perms: int) -> int:
        """Add a CVT entry (lowest invalid slot, else appended) and bump
        the VB's reference count.  The VB must already be enabled."""
        entry = self.registry.get_enabled(vbuid)
        t = self.table(client)
        cvt = CVTEntry(valid=True, vbuid=vbuid, perms=perms)
        for i, e in enumerate(t.entries):
            if not e.valid:
                t.entries[i] = cvt
                entry.ref_count += 1
                return i
        if len(t.entries) >= MAX_CVT_ENTRIES:
            raise ProtectionFault("index_range",
                                  f"client {client} CVT full ({MAX_CVT_ENTRIES})")
        t.entries.append(cvt)
        entry.ref_count += 1
        return len(t.entries) - 1

    def detach(self, client: int, vbuid: Vbuid) -> int:
        t = self.table(client)
        idx = t.find(vbuid)
        if idx is None:
            raise LifecycleError(f"client {client} has no valid entry for {vbuid}")
        t.entries[idx].valid = False
        entry = self.registry.get(vbuid)
        if entry is not None and entry.ref_count > 0:
            entry.ref_count -= 1
        return idx

    def repoint(self, client: int, old: Vbuid, new: Vbuid) -> int:
        """Swap the VB a CVT entry names, preserving the index (promotion)."""
        t = self.table(client)
        idx = t.find(old)
        if idx is None:
            raise LifecycleError(f"client {client} has no valid entry for {old}")
        t.entries[idx].vbuid = new
        self.registry.get_enabled(new).ref_count += 1
        old_entry = self.registry.get(old)
        if old_entry is not None and old_entry.ref_count > 0:
            old_entry.ref_count -= 1
        return idx

    def check_and_form_address(self, client: int, cvt_index: int, offset: int,
                               access_kind: str) -> tuple[int, bool]:
        """Validate an access and return (block address, cvt cache hit).

        Raises ProtectionFault with a distinct code per failure mode.
        """
        t = self.table(client)
        if not 0 <= cvt_index < len(t.entries):
            self.stats.bump("fault.index_range")
            raise ProtectionFault("index_range", f"index {cvt_index} of client {client}")
        cache_hit = self.cvt_cache.access(client, cvt_index)
        e = t.entries[cvt_index]
        if not e.valid:
            self.stats.bump("fault.invalid_entry")
            raise ProtectionFault("invalid_entry", f"index {cvt_index} of client {client}")
        bit = _KIND_BIT[access_kind]
        if not e.perms & bit:
            self.stats.bump("fault.perm")
            raise ProtectionFault("perm", f"{access_kind} on {rwx_str(e.perms)} entry")
        cls = e.vbuid.size_class
        if offset >= cls.size_bytes:
            self.stats.bump("fault.bounds")
            raise ProtectionFault("bounds", f"offset {offset:#x} in {cls.size_bytes}-byte VB")
        raw = encode(e.vbuid.size_id, e.vbuid.vbid, offset, e.vbuid.vm_id,
                     self.registry.vm_mode)
        return raw, cache_hit

    def ref_count_audit(self) -> dict[Vbuid, int]:
        """Valid-entry counts per VB across every client table."""
        counts: dict[Vbuid, int] = {}
        for t in self.tables.values():
            for e in t.entries:
                if e.valid:
                    counts[e.vbuid] = counts.get(e.vbuid, 0) + 1
        return counts
