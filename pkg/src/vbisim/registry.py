"""Per-size-class VB info tables and the block lifecycle.

Each size class has its own table, indexed by block id.  Tables grow
only to the largest id ever enabled and low ids are reused first, so
table length is bounded by the peak number of concurrently live blocks.
Disabling a block schedules a lazy cache scrub; the id may not be
re-enabled until the scrub completes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .addrspace import CapacityError, Vbuid, class_for_request
from .stats import Stats
from .translate import (BlockState, LruCache, StructKind, TranslationStructure,
                        choose_structure_kind)

PROP_NAMES = (
    "code",
    "read_only",
    "kernel",
    "compressible",
    "persistent",
    "latency_sensitive",
    "bandwidth_sensitive",
    "error_tolerant",
)
PROP_BITS = {name: 1 << i for i, name in enumerate(PROP_NAMES)}
PROPS_MASK_WIDTH = 16  # upper 8 bits reserved


class LifecycleError(Exception):
    """Enable/disable/attach sequencing violated."""


@dataclass(frozen=True)
class Props:
    mask: int = 0

    @classmethod
    def of(cls, *names: str) -> "Props":
        mask = 0
        for n in names:
            if n not in PROP_BITS:
                raise ValueError(f"unknown property {n!r}")
            mask |= PROP_BITS[n]
        return cls(mask)

    @classmethod
    def parse(cls, text: str) -> "Props":
        """Comma-separated flag names, '-' for none, or a hex mask."""
        text = text.strip()
        if text in ("-", ""):
            return cls(0)
        if text.startswith("0x"):
            mask = int(text, 16)
            if mask >> PROPS_MASK_WIDTH:
                raise ValueError(f"props mask {text} wider than {PROPS_MASK_WIDTH} bits")
            return cls(mask)
        return cls.of(*text.split(","))

    def has(self, name: str) -> bool:
        return bool(self.mask & PROP_BITS[name])

    def perms(self) -> int:
        """RWX mask implied by the content flags (R=4, W=2, X=1)."""
        p = 4
        if not self.has("read_only"):
            p |= 2
        if self.has("code"):
            p |= 1
        return p

    def __str__(self) -> str:
        names = [n for n in PROP_NAMES if self.has(n)]
        return ",".join(names) if names else "-"


@dataclass
class VITEntry:
    vbuid: Vbuid
    enabled: bool = False
    props: Props = field(default_factory=Props)
    ref_count: int = 0
    structure: TranslationStructure | None = None

    @property
    def ts_kind(self) -> StructKind | None:
        return self.structure.kind if self.structure else None


class VITCache(LruCache):
    """Fully-associative LRU over VBUIDs, write-through with the backing
    tables (entries are shared objects, so only presence is modeled)."""

    def __init__(self, entries: int = 64):
        super().__init__(entries)


class Scrubber:
    """FIFO of lazy cache-scrub jobs keyed by VBUID.

    A job invalidating N lines completes N / rate cycles after it is
    scheduled; until then the id may not be re-enabled.  Time is in
    quarter-cycles like the rest of the engine.
    """

    def __init__(self, lines_per_cycle: int = 64):
        self.rate = lines_per_cycle
        self.pending: dict[Vbuid, int] = {}  # vbuid -> ready quarter-cycle

    def schedule(self, vbuid: Vbuid, lines: int, now_q: int) -> None:
        cycles = -(-lines // self.rate) if lines else 0
        self.pending[vbuid] = now_q + 4 * cycles

    def ready(self, vbuid: Vbuid, now_q: int) -> bool:
        t = self.pending.get(vbuid)
        if t is None:
            return True
        if now_q >= t:
            del self.pending[vbuid]
            return True
        return False

    def wait_for(self, vbuid: Vbuid, now_q: int) -> int:
        """Quarter-cycles to stall until the scrub finishes (0 if done)."""
        t = self.pending.pop(vbuid, None)
        if t is None or now_q >= t:
            return 0
        return t - now_q


class VbInfoTable:
    """One size class worth of VB metadata."""

    def __init__(self, size_id: int):
        self.size_id = size_id
        self.entries: list[VITEntry | None] = []
        self.peak_len = 0

    def get(self, vbid: int) -> VITEntry | None:
        if 0 <= vbid < len(self.entries):
            return self.entries[vbid]
        return None

    def put(self, entry: VITEntry) -> None:
        vbid = entry.vbuid.vbid
        while len(self.entries) <= vbid:
            self.entries.append(None)
        self.entries[vbid] = entry
        self.peak_len = max(self.peak_len, len(self.entries))

    def clear(self, vbid: int) -> None:
        if 0 <= vbid < len(self.entries):
            self.entries[vbid] = None

    def enabled_vbids(self) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e is not None and e.enabled]


class Registry:
    def __init__(self, stats: Stats, vm_mode: bool = False, vm_id: int = 0,
                 scrub_lines_per_cycle: int = 64):
        self.stats = stats
        self.vm_mode = vm_mode
        self.vm_id = vm_id if vm_mode else 0
        self.tables: dict[int, VbInfoTable] = {}
        self.vit_cache = VITCache()
        self.scrubber = Scrubber(scrub_lines_per_cycle)

    def table(self, size_id: int) -> VbInfoTable:
        t = self.tables.get(size_id)
        if t is None:
            t = VbInfoTable(size_id)
            self.tables[size_id] = t
        return t

    def get(self, vbuid: Vbuid) -> VITEntry | None:
        return self.table(vbuid.size_id).get(vbuid.vbid)

    def get_enabled(self, vbuid: Vbuid) -> VITEntry:
        e = self.get(vbuid)
        if e is None or not e.enabled:
            raise LifecycleError(f"VB {vbuid} is not enabled")
        return e

    def pick_free_vbid(self, size_id: int, now_q: int) -> int:
        """Lowest-numbered disabled vbid whose scrub (if any) finished."""
        t = self.table(size_id)
        vbid_bits = Vbuid(size_id, 0, self.vm_id).size_class.vbid_bits(self.vm_mode)
        for vbid in range(len(t.entries) + 1):
            if vbid >= (1 << vbid_bits):
                break
            e = t.get(vbid)
            if e is not None and e.enabled:
                continue
            if not self.scrubber.ready(Vbuid(size_id, vbid, self.vm_id), now_q):
                continue
            return vbid
        raise CapacityError(f"size class {size_id} exhausted")

    def pick_class_and_vbid(self, expected_size: int, now_q: int) -> Vbuid:
        cls = class_for_request(expected_size)
        vbid = self.pick_free_vbid(cls.size_id, now_q)
        return Vbuid(cls.size_id, vbid, self.vm_id)

    def enable_vb(self, vbuid: Vbuid, props: Props) -> VITEntry:
        existing = self.get(vbuid)
        if existing is not None and existing.enabled:
            raise LifecycleError(f"VB {vbuid} already enabled")
        entry = VITEntry(vbuid=vbuid, enabled=True, props=props, ref_count=0)
        self.table(vbuid.size_id).put(entry)
        self.stats.bump("vb.enabled")
        return entry

    def disable_vb(self, vbuid: Vbuid) -> VITEntry:
        """Metadata half of disable: validates and clears the entry.
        Frame release and cache scrubbing are the caller's side."""
        entry = self.get_enabled(vbuid)
        if entry.ref_count > 0:
            raise LifecycleError(f"VB {vbuid} still referenced ({entry.ref_count})")
        self.table(vbuid.size_id).clear(vbuid.vbid)
        self.vit_cache.invalidate_where(lambda k: k == vbuid)
        self.stats.bump("vb.disabled")
        return entry

    def clone_vb(self, src: Vbuid, dst: Vbuid, mm) -> None:
        """Share the source's mappings with the destination, copy-on-write."""
        s = self.get_enabled(src)
        d = self.get_enabled(dst)
        if src.size_id != dst.size_id:
            raise LifecycleError(f"clone {src} -> {dst}: size classes differ")
        if d.structure is not None and d.structure.instantiated:
            raise LifecycleError(f"clone target {dst} already has frames")
        if s.structure is None or not s.structure.instantiated:
            # Nothing allocated yet; the clone stays lazily empty too.
            self.stats.bump("vb.cloned")
            return
        st = s.structure
        dst_struct = TranslationStructure(st.kind, dst.size_id)
        dst_struct.base_frame = st.base_frame
        shared: list[int] = []
        for block, m in st.blocks.items():
            copy = dst_struct.insert(block, m.frame, m.state)
            copy.cow = m.cow
            if m.state is BlockState.ALLOCATED:
                frame = st.frame_of(block)
                copy.frame = frame
                m.cow = True
                copy.cow = True
                shared.append(frame)
        d.structure = dst_struct
        mm.share_frames(shared)
        mm.register(d)
        self.stats.bump("vb.cloned")

    def promote_graft(self, src: Vbuid, dst: Vbuid, mm) -> None:
        """Move the source's mappings into the low offsets of the larger
        destination.  Cache flush and CVT repointing happen around this."""
        s = self.get_enabled(src)
        d = self.get_enabled(dst)
        if dst.size_id <= src.size_id:
            raise LifecycleError(f"promote {src} -> {dst}: target class not larger")
        if d.structure is not None and d.structure.instantiated:
            raise LifecycleError(f"promote target {dst} already has frames")
        kind = choose_structure_kind(dst.size_id)
        dst_struct = TranslationStructure(kind, dst.size_id)
        if s.structure is not None:
            src_struct = s.structure
            for block, m in src_struct.blocks.items():
                frame = src_struct.frame_of(block) if m.state is BlockState.ALLOCATED else m.frame
                copy = dst_struct.insert(block, frame, m.state)
                copy.cow = m.cow
            s.structure = None
        d.structure = dst_struct
        # reservations and allocation history follow the data
        rec = mm.reservations.pop(src, None)
        if rec is not None:
            rec.vbuid = dst
            rec.directly_mapped = False
            mm.reservations[dst] = rec
            for region in mm.regions:
                region.retag_reserved(src, dst)
        log = mm.alloc_log.pop(src, None)
        if log is not None:
            dst_log = mm.alloc_log.setdefault(dst, type(log)())
            dst_log.update(log)
        mm.register(d)
        self.stats.bump("vb.promoted")
