"""Address translation: per-block mapping structures, TLBs, the
memory-controller translation path for block addresses, and the
conventional x86-64-style walkers (native, 2 MB pages, nested 2D).

Mapping granularity is 4 KB everywhere.  Multi-level tables fan out 9
bits per level, so a structure for a block with ``offset_bits`` offset
bits is ``ceil((offset_bits - 12) / 9)`` levels deep.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum

from .addrspace import SIZE_CLASSES, Vbuid, size_class
from .stats import Stats

FRAME_BYTES = 4096
FANOUT_BITS = 9


class BlockState(Enum):
    UNALLOCATED = "unallocated"
    RESERVED = "reserved"
    ALLOCATED = "allocated"
    SWAPPED_OUT = "swapped_out"


class StructKind(Enum):
    DIRECT = "direct"
    SINGLE_LEVEL = "single_level"
    MULTI_LEVEL = "multi_level"


@dataclass
class BlockMap:
    state: BlockState = BlockState.UNALLOCATED
    frame: int | None = None
    cow: bool = False


def multi_level_depth(offset_bits: int) -> int:
    return max(1, math.ceil((offset_bits - 12) / FANOUT_BITS))


def choose_structure_kind(size_id: int, early_reserved: bool = False) -> StructKind:
    """Static structure choice by block size; early reservation forces direct."""
    if early_reserved or size_id == 0:
        return StructKind.DIRECT
    if size_id in (1, 2):
        return StructKind.SINGLE_LEVEL
    return StructKind.MULTI_LEVEL


class TranslationStructure:
    """Maps 4 KB-aligned block offsets of one VB to physical frames.

    ``blocks`` is sparse: absent indices are unallocated.  For multi-level
    tables, ``nodes`` tracks which table nodes exist so a lookup of an
    unpopulated region stops at the first missing level.
    """

    def __init__(self, kind: StructKind, size_id: int):
        self.kind = kind
        self.size_id = size_id
        cls = size_class(size_id)
        self.num_blocks = cls.size_bytes // FRAME_BYTES
        self.depth = multi_level_depth(cls.offset_bits)
        self.base_frame: int | None = None  # direct mapping only
        self.blocks: dict[int, BlockMap] = {}
        self.nodes: set[tuple[int, int]] = set()  # (level, prefix), multi-level

    @property
    def instantiated(self) -> bool:
        return bool(self.blocks) or self.base_frame is not None

    def _node_path(self, block: int) -> list[tuple[int, int]]:
        # The node read at level L is shared by every block with the same
        # (L-1)-level prefix; level 1 is the single root node.
        return [
            (level, block >> (FANOUT_BITS * (self.depth - level + 1)))
            for level in range(1, self.depth + 1)
        ]

    def insert(self, block: int, frame: int, state: BlockState = BlockState.ALLOCATED) -> BlockMap:
        m = self.blocks.get(block)
        if m is None:
            m = BlockMap()
            self.blocks[block] = m
        m.state = state
        m.frame = frame
        if self.kind is StructKind.MULTI_LEVEL:
            self.nodes.update(self._node_path(block))
        return m

    def lookup(self, block: int) -> BlockMap | None:
        return self.blocks.get(block)

    def frame_of(self, block: int) -> int | None:
        if self.kind is StructKind.DIRECT and self.base_frame is not None:
            m = self.blocks.get(block)
            if m is not None and m.frame is not None:
                return m.frame
            return self.base_frame + block
        m = self.blocks.get(block)
        return m.frame if m else None

    def walk_accesses(self, block: int) -> int:
        """Memory accesses a cold walk of this structure performs.

        Direct mappings resolve from the VB metadata alone.  A one-level
        table costs one access once it exists.  A multi-level walk reads
        one node per existing level along the path and stops at the first
        missing node.
        """
        if self.kind is StructKind.DIRECT:
            return 0
        if not self.instantiated:
            return 0
        if self.kind is StructKind.SINGLE_LEVEL:
            return 1
        accesses = 0
        for level, prefix in self._node_path(block):
            if (level, prefix) not in self.nodes:
                break
            accesses += 1
        return accesses

    def demote_to_table(self) -> None:
        """Drop direct mapping, rebuilding per-block entries for what is
        already allocated.  Used when contiguity is broken."""
        if self.kind is not StructKind.DIRECT:
            return
        base = self.base_frame
        self.kind = choose_structure_kind(self.size_id)
        if self.kind is StructKind.DIRECT:
            self.kind = StructKind.SINGLE_LEVEL  # 4 KB class never demotes in practice
        for block, m in self.blocks.items():
            if m.frame is None and m.state is BlockState.ALLOCATED and base is not None:
                m.frame = base + block
            if self.kind is StructKind.MULTI_LEVEL and m.state is BlockState.ALLOCATED:
                self.nodes.update(self._node_path(block))
        self.base_frame = None


class LruCache:
    """Fully-associative LRU over hashable keys."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.entries: OrderedDict = OrderedDict()

    def lookup(self, key):
        if key in self.entries:
            self.entries.move_to_end(key)
            return self.entries[key]
        return None

    def contains(self, key) -> bool:
        if key in self.entries:
            self.entries.move_to_end(key)
            return True
        return False

    def insert(self, key, value=True) -> None:
        if key in self.entries:
            self.entries.move_to_end(key)
        elif len(self.entries) >= self.capacity:
            self.entries.popitem(last=False)
        self.entries[key] = value

    def invalidate_where(self, pred) -> int:
        doomed = [k for k in self.entries if pred(k)]
        for k in doomed:
            del self.entries[k]
        return len(doomed)

    def clear(self) -> None:
        self.entries.clear()


class SetAssocCache:
    """Set-associative LRU keyed by hashable keys; sets chosen by hash of key."""

    def __init__(self, entries: int, ways: int):
        self.ways = ways
        self.num_sets = max(1, entries // ways)
        self.sets: list[OrderedDict] = [OrderedDict() for _ in range(self.num_sets)]

    def _set_for(self, key) -> OrderedDict:
        if isinstance(key, tuple):
            idx = key[-1]
        else:
            idx = key
        return self.sets[idx % self.num_sets]

    def lookup(self, key):
        s = self._set_for(key)
        if key in s:
            s.move_to_end(key)
            return s[key]
        return None

    def insert(self, key, value=True) -> None:
        s = self._set_for(key)
        if key in s:
            s.move_to_end(key)
        elif len(s) >= self.ways:
            s.popitem(last=False)
        s[key] = value

    def invalidate_where(self, pred) -> int:
        n = 0
        for s in self.sets:
            doomed = [k for k in s if pred(k)]
            for k in doomed:
                del s[k]
            n += len(doomed)
        return n

    def clear(self) -> None:
        for s in self.sets:
            s.clear()


class Outcome(Enum):
    OK = "ok"
    UNBACKED = "unbacked"
    SWAPPED_OUT = "swapped_out"


@dataclass
class TranslateResult:
    outcome: Outcome
    frame: int | None
    walk_accesses: int
    latency: int
    mapping: BlockMap | None = None


@dataclass
class TlbGeometry:
    l1_4k_entries: int = 64
    l1_2m_entries: int = 32
    l2_entries: int = 512
    l2_ways: int = 4
    vb_direct_entries: int = 32
    pwc_entries: int = 32


class MtlTranslator:
    """Memory-controller-side translation for block addresses.

    Consulted only when an access misses the last-level cache.  Lookup
    order follows the load flow: VB info (cached) gives the structure
    kind, which selects between the whole-VB TLB and the page TLBs; a
    miss there walks the VB's structure.
    """

    def __init__(self, geom: TlbGeometry, stats: Stats, walk_cycles: int,
                 vit_cache_entries: int = 64):
        self.stats = stats
        self.walk_cycles = walk_cycles
        self.vb_direct = LruCache(geom.vb_direct_entries)
        self.l1_4k = LruCache(geom.l1_4k_entries)
        self.l2 = SetAssocCache(geom.l2_entries, geom.l2_ways)
        self.vit_cache = LruCache(vit_cache_entries)

    def _vit_charge(self, vbuid: Vbuid) -> int:
        if self.vit_cache.contains(vbuid):
            self.stats.bump("vit_cache.hit")
            return 0
        self.stats.bump("vit_cache.miss")
        self.vit_cache.insert(vbuid)
        return self.walk_cycles

    def translate(self, entry, block: int) -> TranslateResult:
        """entry: VIT record with .vbuid and .structure (None until the
        first allocation)."""
        vbuid = entry.vbuid
        self.stats.bump("mtl.translations")
        latency = self._vit_charge(vbuid)
        st: TranslationStructure | None = entry.structure
        if st is None or not st.instantiated:
            return TranslateResult(Outcome.UNBACKED, None, 0, latency)

        if st.kind is StructKind.DIRECT:
            if self.vb_direct.lookup(vbuid) is not None:
                self.stats.bump("tlb.vb_direct.hit")
            else:
                self.stats.bump("tlb.vb_direct.miss")
                self.vb_direct.insert(vbuid, st.base_frame)
            return self._finish(st, block, 0, latency)

        key = (vbuid, block)
        if self.l1_4k.lookup(key) is not None:
            self.stats.bump("tlb.l1_4k.hit")
            return self._finish(st, block, 0, latency)
        self.stats.bump("tlb.l1_4k.miss")
        if self.l2.lookup(key) is not None:
            self.stats.bump("tlb.l2.hit")
            self.l1_4k.insert(key)
            return self._finish(st, block, 0, latency)
        self.stats.bump("tlb.l2.miss")

        accesses = st.walk_accesses(block)
        self.stats.bump("walk.accesses", accesses)
        latency += accesses * self.walk_cycles
        m = st.lookup(block)
        if m is not None and m.state is BlockState.ALLOCATED:
            self.l1_4k.insert(key)
            self.l2.insert(key)
        return self._finish(st, block, accesses, latency)

    def _finish(self, st: TranslationStructure, block: int, accesses: int,
                latency: int) -> TranslateResult:
        m = st.lookup(block)
        if st.kind is StructKind.DIRECT:
            if m is None or m.state in (BlockState.UNALLOCATED, BlockState.RESERVED):
                return TranslateResult(Outcome.UNBACKED, None, accesses, latency, m)
            if m.state is BlockState.SWAPPED_OUT:
                return TranslateResult(Outcome.SWAPPED_OUT, None, accesses, latency, m)
            return TranslateResult(Outcome.OK, st.frame_of(block), accesses, latency, m)
        if m is None or m.state in (BlockState.UNALLOCATED, BlockState.RESERVED):
            return TranslateResult(Outcome.UNBACKED, None, accesses, latency, m)
        if m.state is BlockState.SWAPPED_OUT:
            return TranslateResult(Outcome.SWAPPED_OUT, None, accesses, latency, m)
        return TranslateResult(Outcome.OK, m.frame, accesses, latency, m)

    def invalidate_vb(self, vbuid: Vbuid) -> None:
        self.vb_direct.invalidate_where(lambda k: k == vbuid)
        self.l1_4k.invalidate_where(lambda k: k[0] == vbuid)
        self.l2.invalidate_where(lambda k: k[0] == vbuid)
        self.vit_cache.invalidate_where(lambda k: k == vbuid)

    def invalidate_block(self, vbuid: Vbuid, block: int) -> None:
        key = (vbuid, block)
        self.l1_4k.invalidate_where(lambda k: k == key)
        self.l2.invalidate_where(lambda k: k == key)


class PageFault(Exception):
    pass


PAGE_4K = 4096
PAGE_2M = 2 * 1024 * 1024


class RadixTable:
    """One radix page table over 48-bit virtual (or guest-physical) space."""

    def __init__(self, levels: int, page_bits: int):
        self.levels = levels
        self.page_bits = page_bits
        self.leaves: dict[int, int] = {}  # vpn -> frame
        self.nodes: set[tuple[int, int]] = set()

    def node_path(self, vpn: int) -> list[tuple[int, int]]:
        # Node identity at level L is the (L-1)-level prefix; level 1 is
        # the single root node.
        return [
            (level, vpn >> (FANOUT_BITS * (self.levels - level + 1)))
            for level in range(1, self.levels + 1)
        ]

    def entry_prefix(self, vpn: int, level: int) -> int:
        # Identity of the pointer read at `level` (names the level+1 node).
        return vpn >> (FANOUT_BITS * (self.levels - level))

    def install(self, vpn: int, frame: int) -> None:
        self.nodes.update(self.node_path(vpn))
        self.leaves[vpn] = frame

    def walk(self, vpn: int) -> tuple[int | None, int]:
        """Returns (frame or None, table accesses performed)."""
        return self.walk_from(vpn, 1)

    def walk_from(self, vpn: int, start_level: int) -> tuple[int | None, int]:
        accesses = 0
        for level, prefix in self.node_path(vpn):
            if level < start_level:
                continue
            if (level, prefix) not in self.nodes:
                return None, accesses
            accesses += 1
        return self.leaves.get(vpn), accesses


class X86Walker:
    """TLB-fronted page walker for the conventional baselines.

    Modes: native4k, native2m, nested4k, nested2m.  The nested modes run
    every guest table node address through the host table (the 2D walk);
    the walk cache holds non-leaf node pointers and, in nested mode,
    serves host-table nodes.
    """

    def __init__(self, mode: str, geom: TlbGeometry, stats: Stats,
                 alloc_frames, walk_cycles: int, fault_cycles: int,
                 perfect_tlb: bool = False):
        if mode not in ("native4k", "native2m", "nested4k", "nested2m"):
            raise ValueError(f"unknown walk mode {mode!r}")
        self.mode = mode
        self.stats = stats
        self.nested = mode.startswith("nested")
        self.big_pages = mode.endswith("2m")
        self.page_bits = 21 if self.big_pages else 12
        self.levels = 3 if self.big_pages else 4
        self.alloc_frames = alloc_frames  # (order) -> frame
        self.walk_cycles = walk_cycles
        self.fault_cycles = fault_cycles
        self.perfect_tlb = perfect_tlb

        self.l1 = LruCache(geom.l1_2m_entries if self.big_pages else geom.l1_4k_entries)
        self.l2 = SetAssocCache(geom.l2_entries, geom.l2_ways)
        self.pwc = LruCache(geom.pwc_entries)

        self.tables: dict[int, RadixTable] = {}  # per client (guest side if nested)
        self.host_table = RadixTable(self.levels, self.page_bits) if self.nested else None
        self.next_gpa_page = 1  # guest-physical bump allocator, page units
        self._next_table_frame = 1 << 40  # metadata frames, outside the pool

    def _table_backing_frame(self) -> int:
        self._next_table_frame += 1
        return self._next_table_frame

    def _table(self, client: int) -> RadixTable:
        t = self.tables.get(client)
        if t is None:
            t = RadixTable(self.levels, self.page_bits)
            self.tables[client] = t
        return t

    def _order(self) -> int:
        return 9 if self.big_pages else 0

    def _ensure_mapped(self, client: int, vpn: int) -> int:
        """Install translations on first touch; returns fault latency."""
        latency = 0
        t = self._table(client)
        if self.nested:
            if vpn not in t.leaves:
                t.install(vpn, self.next_gpa_page)
                self.next_gpa_page += 1
                self.stats.bump("fault.baseline")
                latency += self.fault_cycles
                # guest table nodes live in guest-physical memory, so the
                # host must map them before they can be walked
                host = self.host_table
                for level, prefix in t.node_path(vpn):
                    node_gpa = self._guest_node_gpa(client, level, prefix)
                    if node_gpa not in host.leaves:
                        host.install(node_gpa, self._table_backing_frame())
            gppn = t.leaves[vpn]
            host = self.host_table
            if gppn not in host.leaves:
                host.install(gppn, self.alloc_frames(self._order()))
                self.stats.bump("fault.baseline")
                latency += self.fault_cycles
        else:
            if vpn not in t.leaves:
                t.install(vpn, self.alloc_frames(self._order()))
                self.stats.bump("fault.baseline")
                latency += self.fault_cycles
        return latency

    def resolve(self, client: int, vaddr: int) -> int:
        """Physical address without TLB or timing effects (writeback path)."""
        vpn = vaddr >> self.page_bits
        self._ensure_mapped(client, vpn)
        t = self._table(client)
        frame = t.leaves[vpn]
        if self.nested:
            frame = self.host_table.leaves[frame]
        page_off = vaddr & ((1 << self.page_bits) - 1)
        return frame * FRAME_BYTES + page_off

    def _host_walk(self, gpa_page: int) -> tuple[int, int]:
        """Walk the host table for one guest-physical page with walk-cache
        help; returns (host frame, accesses)."""
        host = self.host_table
        start = 1
        for level in range(host.levels - 1, 0, -1):
            if self.pwc.lookup(("host", level, host.entry_prefix(gpa_page, level))) is not None:
                self.stats.bump("pwc.hit")
                start = level + 1
                break
        frame, accesses = host.walk_from(gpa_page, start)
        for level in range(1, host.levels):
            self.pwc.insert(("host", level, host.entry_prefix(gpa_page, level)))
        return frame, accesses

    def _walk(self, client: int, vpn: int) -> tuple[int, int]:
        """Full walk after a TLB miss; returns (frame, table accesses)."""
        t = self._table(client)
        if not self.nested:
            start = 1
            for level in range(t.levels - 1, 0, -1):
                if self.pwc.lookup((client, level, t.entry_prefix(vpn, level))) is not None:
                    self.stats.bump("pwc.hit")
                    start = level + 1
                    break
            frame, accesses = t.walk_from(vpn, start)
            for level in range(1, t.levels):
                self.pwc.insert((client, level, t.entry_prefix(vpn, level)))
            return frame, accesses

        # 2D walk: each guest node address is itself translated by the host.
        accesses = 0
        for level, prefix in t.node_path(vpn):
            node_gpa = self._guest_node_gpa(client, level, prefix)
            _, host_acc = self._host_walk(node_gpa)
            accesses += host_acc + 1  # host walk plus the guest entry read
        gppn = t.leaves[vpn]
        frame, host_acc = self._host_walk(gppn)
        accesses += host_acc
        return frame, accesses

    def _guest_node_gpa(self, client: int, level: int, prefix: int) -> int:
        # Synthetic stable guest-physical page per table node; only its
        # identity matters for host-walk caching.
        return (client << 40) | (level << 36) | prefix

    def translate(self, client: int, vaddr: int) -> tuple[int, int, int]:
        """Returns (physical address, walk accesses, latency cycles)."""
        vpn = vaddr >> self.page_bits
        page_off = vaddr & ((1 << self.page_bits) - 1)
        latency = self._ensure_mapped(client, vpn)

        if self.perfect_tlb:
            frame = self._table(client).leaves[vpn]
            if self.nested:
                frame = self.host_table.leaves[frame]
            return frame * FRAME_BYTES + page_off, 0, latency

        key = (client, vpn)
        tlb_name = "tlb.l1_2m" if self.big_pages else "tlb.l1_4k"
        frame = self.l1.lookup(key)
        if frame is not None:
            self.stats.bump(f"{tlb_name}.hit")
            return frame * FRAME_BYTES + page_off, 0, latency
        self.stats.bump(f"{tlb_name}.miss")
        frame = self.l2.lookup(key)
        if frame is not None:
            self.stats.bump("tlb.l2.hit")
            self.l1.insert(key, frame)
            return frame * FRAME_BYTES + page_off, 0, latency
        self.stats.bump("tlb.l2.miss")

        frame, accesses = self._walk(client, vpn)
        self.stats.bump("walk.accesses", accesses)
        if self.nested:
            self.stats.bump("walk.nested_accesses", accesses)
        latency += accesses * self.walk_cycles
        self.l1.insert(key, frame)
        self.l2.insert(key, frame)
        return frame * FRAME_BYTES + page_off, accesses, latency

    def flush_caches(self) -> None:
        self.l1.clear()
        self.l2.clear()
        self.pwc.clear()
