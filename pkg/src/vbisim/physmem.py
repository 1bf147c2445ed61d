"""Buddy-managed physical frame pool with per-VB reservations.

Blocks carry one of three tags: free and unreserved, free but reserved
for a specific VB, or allocated.  Coalescing merges buddies only within
the same tag class.  Allocation for a VB follows a strict three-level
priority: its own reserved blocks, then unreserved blocks, then blocks
reserved for other VBs (which breaks the owner's direct mapping).
"""

from __future__ import annotations

import heapq
from collections import OrderedDict
from dataclasses import dataclass, field

from .addrspace import Vbuid
from .stats import Stats
from .translate import (BlockState, StructKind, TranslationStructure,
                        choose_structure_kind)

FRAME_BYTES = 4096


class OutOfMemory(Exception):
    pass


UNRESERVED = None  # tag for free blocks not pinned to any VB


class BuddyRegion:
    """Binary buddy allocator over a contiguous frame range."""

    def __init__(self, base: int, nframes: int):
        self.base = base
        self.nframes = nframes
        self.max_order = max(0, nframes.bit_length() - 1)
        # start -> (order, tag); tag is UNRESERVED or the owning Vbuid
        self.free_blocks: dict[int, tuple[int, object]] = {}
        # lazy min-heaps of starts, per (tag, order)
        self._heaps: dict[tuple[object, int], list[int]] = {}
        self.allocated: dict[int, tuple[int, object]] = {}  # start -> (order, owner)
        self._seed()

    def _seed(self) -> None:
        rel = 0
        while rel < self.nframes:
            order = self.max_order
            while order > 0 and (rel % (1 << order) or rel + (1 << order) > self.nframes):
                order -= 1
            self._insert_free(self.base + rel, order, UNRESERVED, coalesce=False)
            rel += 1 << order

    # -- free-list plumbing --

    def _heap(self, tag, order: int) -> list[int]:
        return self._heaps.setdefault((tag, order), [])

    def _insert_free(self, start: int, order: int, tag, coalesce: bool = True) -> None:
        if coalesce:
            rel = start - self.base
            while order < self.max_order:
                buddy = self.base + (rel ^ (1 << order))
                if self.free_blocks.get(buddy) == (order, tag):
                    del self.free_blocks[buddy]
                    rel = min(rel, buddy - self.base)
                    order += 1
                else:
                    break
            start = self.base + rel
        self.free_blocks[start] = (order, tag)
        heapq.heappush(self._heap(tag, order), start)

    def _pop_lowest(self, tag, order: int) -> int | None:
        heap = self._heaps.get((tag, order))
        while heap:
            start = heap[0]
            if self.free_blocks.get(start) == (order, tag):
                heapq.heappop(heap)
                del self.free_blocks[start]
                return start
            heapq.heappop(heap)  # stale entry
        return None

    def _take(self, tag, order: int) -> int | None:
        """Lowest-address block of the smallest sufficient order, split down."""
        for o in range(order, self.max_order + 1):
            start = self._pop_lowest(tag, o)
            if start is None:
                continue
            while o > order:
                o -= 1
                self._insert_free(start + (1 << o), o, tag, coalesce=False)
            return start
        return None

    # -- public surface --

    def alloc(self, order: int, owner=UNRESERVED) -> int | None:
        start = self._take(UNRESERVED, order)
        if start is not None:
            self.allocated[start] = (order, owner)
        return start

    def alloc_reserved(self, vbuid: Vbuid, order: int) -> int | None:
        start = self._take(vbuid, order)
        if start is not None:
            self.allocated[start] = (order, vbuid)
        return start

    def alloc_exact(self, want: int, vbuid: Vbuid) -> bool:
        """Carve the single frame `want` out of a block reserved for vbuid."""
        rel = want - self.base
        for order in range(self.max_order + 1):
            cand = self.base + ((rel >> order) << order)
            if self.free_blocks.get(cand) == (order, vbuid):
                del self.free_blocks[cand]
                o = order
                while o > 0:  # split, keeping the half containing `want`
                    o -= 1
                    low, high = cand, cand + (1 << o)
                    if want < high:
                        self._insert_free(high, o, vbuid, coalesce=False)
                        cand = low
                    else:
                        self._insert_free(low, o, vbuid, coalesce=False)
                        cand = high
                self.allocated[want] = (0, vbuid)
                return True
        return False

    def reserve(self, vbuid: Vbuid, order: int) -> int | None:
        """Retag an unreserved free block as reserved for vbuid."""
        start = self._take(UNRESERVED, order)
        if start is None:
            return None
        self._insert_free(start, order, vbuid, coalesce=True)
        return start

    def free(self, start: int, back_tag=UNRESERVED) -> None:
        order, _ = self.allocated.pop(start)
        self._insert_free(start, order, back_tag)

    def unreserve_all(self, vbuid: Vbuid) -> int:
        freed = 0
        doomed = [(s, o) for s, (o, t) in self.free_blocks.items() if t == vbuid]
        for start, order in doomed:
            del self.free_blocks[start]
            self._insert_free(start, order, UNRESERVED)
            freed += 1 << order
        for key in [k for k in self._heaps if k[0] == vbuid]:
            del self._heaps[key]
        return freed

    def retag_reserved(self, old: Vbuid, new: Vbuid) -> None:
        doomed = [(s, o) for s, (o, t) in self.free_blocks.items() if t == old]
        for start, order in doomed:
            del self.free_blocks[start]
            self._insert_free(start, order, new)

    def alloc_foreign_reserved(self, order: int, exclude: Vbuid):
        """Consume a block reserved for some other VB: smallest sufficient
        order first, then lowest address.  Returns (start, owner)."""
        cands = [
            (o, start, tag)
            for start, (o, tag) in self.free_blocks.items()
            if tag is not UNRESERVED and tag != exclude and o >= order
        ]
        for o, start, owner in sorted(cands, key=lambda t: (t[0], t[1])):
            del self.free_blocks[start]
            while o > order:
                o -= 1
                self._insert_free(start + (1 << o), o, owner, coalesce=False)
            self.allocated[start] = (order, exclude)
            return start, owner
        return None, None

    def largest_free_order(self, tag=UNRESERVED) -> int | None:
        orders = [o for o, t in self.free_blocks.values() if t == tag]
        return max(orders) if orders else None

    def free_frames(self) -> int:
        return sum(1 << o for o, _ in self.free_blocks.values())

    def allocated_frames(self) -> int:
        return sum(1 << o for o, _ in self.allocated.values())

    def check_conserved(self) -> bool:
        return self.free_frames() + self.allocated_frames() == self.nframes


@dataclass
class ReservationRecord:
    vbuid: Vbuid
    # (first VB block, block count, first physical frame) per chunk
    chunks: list[tuple[int, int, int]] = field(default_factory=list)
    directly_mapped: bool = False

    def frame_for(self, block: int) -> int | None:
        for vb_start, count, phys in self.chunks:
            if vb_start <= block < vb_start + count:
                return phys + (block - vb_start)
        return None

    def covers_frame(self, frame: int) -> bool:
        return any(phys <= frame < phys + count for _, count, phys in self.chunks)


@dataclass
class AllocationRequest:
    vbuid: Vbuid
    block: int  # 4 KB block index within the VB
    reason: str  # demand | dirty_writeback | swap_in | cow | baseline_fault


class MemoryManager:
    """Frame pool spanning one or more device regions, plus the
    allocation policies layered on top: three-level priority, early
    reservation, copy-on-write resolution, and last-resort swapping."""

    def __init__(self, regions: list[BuddyRegion], stats: Stats,
                 early_reservation: bool = False):
        self.regions = regions
        self.stats = stats
        self.early_reservation = early_reservation
        self.reservations: dict[Vbuid, ReservationRecord] = {}
        self.vb_home: dict[Vbuid, int] = {}
        self.frame_sharers: dict[int, int] = {}  # frame -> sharer count (>= 2)
        # per-VB blocks in allocation order, oldest first (swap victims)
        self.alloc_log: dict[Vbuid, OrderedDict] = {}
        self.entries: dict[Vbuid, object] = {}  # enabled VBs with structures
        self.on_unmap = None  # callback(vbuid, block | None) for TLB shootdown
        self.place_hook = None  # callback(entry) choosing a home region

    @property
    def total_frames(self) -> int:
        return sum(r.nframes for r in self.regions)

    def free_frames(self) -> int:
        return sum(r.free_frames() for r in self.regions)

    def check_conserved(self) -> bool:
        return all(r.check_conserved() for r in self.regions)

    def region_of_frame(self, frame: int) -> int:
        for i, r in enumerate(self.regions):
            if r.base <= frame < r.base + r.nframes:
                return i
        raise ValueError(f"frame {frame} outside every region")

    def _pref_order(self, vbuid: Vbuid) -> list[int]:
        home = self.vb_home.get(vbuid, 0)
        return [home] + [i for i in range(len(self.regions)) if i != home]

    def structure_for(self, entry) -> TranslationStructure:
        if entry.structure is None:
            kind = choose_structure_kind(entry.vbuid.size_id)
            entry.structure = TranslationStructure(kind, entry.vbuid.size_id)
        return entry.structure

    # -- allocation --

    def ensure_backed(self, entry, block: int, reason: str = "demand") -> int:
        """Back one 4 KB block of a VB, honoring the three-level priority.

        Returns the frame; raises OutOfMemory only if swapping cannot make
        progress either.
        """
        vbuid = entry.vbuid
        if self.place_hook is not None and vbuid not in self.vb_home:
            self.place_hook(entry)
        if self.early_reservation and vbuid not in self.reservations:
            self.reserve_early(entry)
        st = self.structure_for(entry)
        existing = st.lookup(block)
        if existing is not None and existing.state is BlockState.ALLOCATED:
            return st.frame_of(block)

        frame = self._allocate_priority(vbuid, block)
        if frame is None:
            self._swap_out(exclude=vbuid)
            frame = self._allocate_priority(vbuid, block)
        if frame is None:
            raise OutOfMemory(f"no frame for {vbuid} block {block}")

        if st.kind is StructKind.DIRECT and st.base_frame is None:
            st.base_frame = frame - block
        if (st.kind is StructKind.DIRECT and st.base_frame is not None
                and frame != st.base_frame + block):
            self._break_direct(entry)
        st.insert(block, frame)
        self.alloc_log.setdefault(vbuid, OrderedDict())[block] = None
        self.stats.bump("frames.allocated")
        self.stats.bump(f"alloc.{reason}")
        return frame

    def _allocate_priority(self, vbuid: Vbuid, block: int) -> int | None:
        # (1) blocks reserved for this VB: the exact reserved frame when the
        # reservation covers this offset, else any own-reserved block.
        rec = self.reservations.get(vbuid)
        if rec is not None:
            want = rec.frame_for(block)
            if want is not None:
                region = self.regions[self.region_of_frame(want)]
                if region.alloc_exact(want, vbuid):
                    return want
            for i in self._pref_order(vbuid):
                got = self.regions[i].alloc_reserved(vbuid, 0)
                if got is not None:
                    return got
        # (2) unreserved free blocks
        for i in self._pref_order(vbuid):
            got = self.regions[i].alloc(0, owner=vbuid)
            if got is not None:
                return got
        # (3) blocks reserved for other VBs
        for i in self._pref_order(vbuid):
            got, owner = self.regions[i].alloc_foreign_reserved(0, vbuid)
            if got is not None:
                self.stats.bump("reservation.stolen")
                victim = self.reservations.get(owner)
                if victim is not None and victim.directly_mapped:
                    victim.directly_mapped = False
                    ventry = self.entries.get(owner)
                    if ventry is not None:
                        self._demote(ventry)
                    self.stats.bump("direct_mapping.broken")
                return got
        return None

    def _break_direct(self, entry) -> None:
        rec = self.reservations.get(entry.vbuid)
        if rec is not None:
            rec.directly_mapped = False
        self._demote(entry)
        self.stats.bump("direct_mapping.broken")

    def _demote(self, entry) -> None:
        st = entry.structure
        if st is not None and st.kind is StructKind.DIRECT and entry.vbuid.size_id != 0:
            st.demote_to_table()
            if self.on_unmap is not None:
                self.on_unmap(entry.vbuid, None)

    # -- early reservation --

    def reserve_early(self, entry) -> ReservationRecord:
        """At the first allocation for a VB, reserve contiguous space:
        the whole VB if a single free run fits it (making it directly
        mapped), otherwise chunks of the largest obtainable order."""
        vbuid = entry.vbuid
        nblocks = vbuid.size_class.size_bytes // FRAME_BYTES
        vb_order = max(0, nblocks.bit_length() - 1)
        rec = ReservationRecord(vbuid)
        self.reservations[vbuid] = rec

        for i in self._pref_order(vbuid):
            start = self.regions[i].reserve(vbuid, vb_order)
            if start is not None:
                rec.chunks.append((0, nblocks, start))
                st = entry.structure
                if st is None or not st.instantiated:
                    entry.structure = TranslationStructure(StructKind.DIRECT, vbuid.size_id)
                    entry.structure.base_frame = start
                    rec.directly_mapped = True
                self.stats.bump("reservation.whole_vb")
                self.stats.bump("frames.reserved", nblocks)
                return rec

        # Fragmented pool: chunks of the largest contiguously obtainable order.
        best = None
        for i in self._pref_order(vbuid):
            o = self.regions[i].largest_free_order()
            if o is not None:
                best = o if best is None else max(best, o)
        if best is None:
            return rec  # nothing reservable; allocate sparsely on demand
        best = min(best, vb_order)
        vb_block = 0
        while vb_block < nblocks:
            placed = None
            for i in self._pref_order(vbuid):
                placed = self.regions[i].reserve(vbuid, best)
                if placed is not None:
                    break
            if placed is None:
                break
            rec.chunks.append((vb_block, 1 << best, placed))
            vb_block += 1 << best
        if rec.chunks:
            self.stats.bump("reservation.partial")
            self.stats.bump("frames.reserved", vb_block)
        return rec

    # -- copy on write --

    def share_frames(self, frames: list[int]) -> None:
        for f in frames:
            self.frame_sharers[f] = self.frame_sharers.get(f, 1) + 1

    def resolve_cow(self, entry, block: int) -> tuple[int, bool]:
        """Give the writing VB an exclusive frame for `block`.

        Returns (frame, copied).  The last sharer keeps the original frame
        without a copy.
        """
        st = entry.structure
        m = st.lookup(block)
        if m is None or not m.cow:
            raise ValueError(f"block {block} of {entry.vbuid} is not copy-on-write")
        old = m.frame if m.frame is not None else st.base_frame + block
        sharers = self.frame_sharers.get(old, 1)
        if sharers <= 1:
            m.cow = False
            self.frame_sharers.pop(old, None)
            return old, False
        self.frame_sharers[old] = sharers - 1
        if self.frame_sharers[old] <= 1:
            self.frame_sharers.pop(old, None)

        was_direct = st.kind is StructKind.DIRECT
        frame = self._allocate_priority(entry.vbuid, block)
        if frame is None:
            self._swap_out(exclude=entry.vbuid)
            frame = self._allocate_priority(entry.vbuid, block)
        if frame is None:
            raise OutOfMemory("no frame for copy-on-write resolution")
        m.cow = False
        m.state = BlockState.ALLOCATED
        if was_direct and entry.vbuid.size_id == 0:
            st.base_frame = frame - block
        elif was_direct and frame != (st.base_frame or 0) + block:
            self._break_direct(entry)
        m.frame = frame
        self.alloc_log.setdefault(entry.vbuid, OrderedDict())[block] = None
        self.stats.bump("frames.allocated")
        self.stats.bump("cow.copies")
        if self.on_unmap is not None:
            self.on_unmap(entry.vbuid, block)
        return frame, True

    # -- swapping --

    def _swap_out(self, exclude: Vbuid | None = None) -> bool:
        """Evict the least-recently-allocated block of the VB holding the
        most frames.  Swap traffic is counted, not timed."""
        victims = sorted(
            ((len(log), vb) for vb, log in self.alloc_log.items()
             if log and vb != exclude),
            key=lambda t: (-t[0], t[1]),
        )
        for _, vb in victims:
            entry = self.entries.get(vb)
            if entry is None or entry.structure is None:
                continue
            st = entry.structure
            log = self.alloc_log[vb]
            for block in list(log):
                m = st.lookup(block)
                if m is None or m.state is not BlockState.ALLOCATED:
                    del log[block]
                    continue
                frame = st.frame_of(block)
                if self.frame_sharers.get(frame, 1) > 1:
                    continue  # shared frames stay resident
                del log[block]
                self._release_frame(vb, frame)
                m.state = BlockState.SWAPPED_OUT
                m.frame = None
                if st.kind is StructKind.DIRECT and vb.size_id != 0:
                    self._break_direct(entry)
                self.stats.bump("swap.out")
                if self.on_unmap is not None:
                    self.on_unmap(vb, block)
                return True
        return False

    def swap_in(self, entry, block: int) -> int:
        frame = self.ensure_backed(entry, block, reason="swap_in")
        self.stats.bump("swap.in")
        return frame

    def _release_frame(self, vbuid: Vbuid, frame: int) -> None:
        region = self.regions[self.region_of_frame(frame)]
        rec = self.reservations.get(vbuid)
        back = vbuid if (rec is not None and rec.covers_frame(frame)) else UNRESERVED
        region.free(frame, back_tag=back)

    # -- lifecycle --

    def register(self, entry) -> None:
        self.entries[entry.vbuid] = entry

    def release_vb(self, entry) -> int:
        """Free every allocated and reserved frame of a VB (disable path).
        Returns the number of frames returned to the pool."""
        vbuid = entry.vbuid
        freed = 0
        st = entry.structure
        if st is not None:
            for block, m in st.blocks.items():
                if m.state is not BlockState.ALLOCATED:
                    continue
                frame = st.frame_of(block)
                sharers = self.frame_sharers.get(frame, 1)
                if sharers > 1:
                    self.frame_sharers[frame] = sharers - 1
                    if self.frame_sharers[frame] <= 1:
                        self.frame_sharers.pop(frame, None)
                    continue
                region = self.regions[self.region_of_frame(frame)]
                region.free(frame, back_tag=UNRESERVED)
                freed += 1
                self.stats.bump("frames.freed")
        for region in self.regions:
            region.unreserve_all(vbuid)
        self.reservations.pop(vbuid, None)
        self.alloc_log.pop(vbuid, None)
        self.entries.pop(vbuid, None)
        self.vb_home.pop(vbuid, None)
        return freed

    def alloc_plain(self, order: int, region_idx: int = 0) -> int:
        """Power-of-two allocation outside any VB (baseline data pages)."""
        for i in [region_idx] + [j for j in range(len(self.regions)) if j != region_idx]:
            got = self.regions[i].alloc(order, owner="baseline")
            if got is not None:
                self.stats.bump("frames.allocated", 1 << order)
                return got
        raise OutOfMemory(f"no order-{order} block for baseline allocation")
