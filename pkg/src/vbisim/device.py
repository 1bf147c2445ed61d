"""Bank-level memory device timing with open-page policy, heterogeneous
regions, and hotness-driven VB placement and migration.

Each region (e.g. the DRAM quarter of a hybrid DRAM/PCM system, or the
fast segment of tiered-latency DRAM) has its own rank of banks and its
own timing parameters.  The scheduler is FCFS per bank; activates and
precharges respect the per-rank spacing constraints, and an audit can
replay the emitted command stream against them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .addrspace import Vbuid
from .physmem import BuddyRegion, MemoryManager
from .stats import Stats
from .translate import BlockState, StructKind

ROW_BYTES = 8192
FRAME_BYTES = 4096


@dataclass(frozen=True)
class DeviceTiming:
    trcd: int
    trp: int
    trrd_act: int
    trrd_pre: int
    col: int = 4  # column access after the row is open
    banks: int = 8


DRAM_TIMING = DeviceTiming(trcd=5, trp=5, trrd_act=3, trrd_pre=3)
PCM_TIMING = DeviceTiming(trcd=22, trp=60, trrd_act=2, trrd_pre=11)
TL_FAST_TIMING = DeviceTiming(trcd=3, trp=3, trrd_act=3, trrd_pre=3)


@dataclass
class Bank:
    open_row: int | None = None
    busy_until: int = 0
    row_hits: int = 0
    row_misses: int = 0  # empty and conflict activations


@dataclass
class DeviceRegion:
    name: str
    kind: str  # dram | pcm | tl_fast | tl_slow
    timing: DeviceTiming
    buddy: BuddyRegion
    banks: list[Bank] = field(default_factory=list)
    last_act: int = -(10 ** 9)
    last_pre: int = -(10 ** 9)

    def __post_init__(self):
        if not self.banks:
            self.banks = [Bank() for _ in range(self.timing.banks)]

    @property
    def base_frame(self) -> int:
        return self.buddy.base

    @property
    def nframes(self) -> int:
        return self.buddy.nframes


@dataclass
class Command:
    region: str
    bank: int
    op: str  # ACT | PRE | RD | WR
    cycle: int


class MemoryDevice:
    def __init__(self, regions: list[DeviceRegion], stats: Stats,
                 record_commands: bool = False):
        self.regions = regions
        self.stats = stats
        self.record_commands = record_commands
        self.commands: list[Command] = []
        self.total_latency = 0
        self.total_accesses = 0

    def region_for(self, paddr: int) -> DeviceRegion:
        frame = paddr // FRAME_BYTES
        for r in self.regions:
            if r.base_frame <= frame < r.base_frame + r.nframes:
                return r
        raise ValueError(f"address {paddr:#x} outside every region")

    def _emit(self, region: DeviceRegion, bank: int, op: str, cycle: int) -> None:
        if self.record_commands:
            self.commands.append(Command(region.name, bank, op, cycle))

    def service(self, paddr: int, kind: str, now: int,
                translation: bool = False) -> int:
        """Schedule one line access; returns its completion cycle.

        Row hit: column access only.  Row conflict: precharge, activate,
        then column access.  Activates and precharges on the same rank
        keep their minimum spacing.
        """
        region = self.region_for(paddr)
        t = region.timing
        row = paddr // ROW_BYTES
        bank_idx = row % len(region.banks)
        bank = region.banks[bank_idx]
        start = max(now, bank.busy_until)

        if bank.open_row == row:
            self.stats.bump(f"device.{region.name}.row_hit")
            bank.row_hits += 1
            ready = start
        elif bank.open_row is None:
            t_act = max(start, region.last_act + t.trrd_act)
            self._emit(region, bank_idx, "ACT", t_act)
            region.last_act = t_act
            ready = t_act + t.trcd
            bank.open_row = row
            bank.row_misses += 1
            self.stats.bump(f"device.{region.name}.row_empty")
        else:
            t_pre = max(start, region.last_pre + t.trrd_pre)
            self._emit(region, bank_idx, "PRE", t_pre)
            region.last_pre = t_pre
            t_act = max(t_pre + t.trp, region.last_act + t.trrd_act)
            self._emit(region, bank_idx, "ACT", t_act)
            region.last_act = t_act
            ready = t_act + t.trcd
            bank.open_row = row
            bank.row_misses += 1
            self.stats.bump(f"device.{region.name}.row_conflict")

        self._emit(region, bank_idx, "RD" if kind == "r" else "WR", ready)
        done = ready + t.col
        bank.busy_until = done

        traffic = "translation" if translation else ("reads" if kind == "r" else "writes")
        self.stats.bump(f"device.{region.name}.{traffic}")
        if not translation:
            self.stats.bump("device.data_accesses")
            self.total_latency += done - now
            self.total_accesses += 1
        return done

    def avg_access_latency(self) -> float:
        if not self.total_accesses:
            return 0.0
        return self.total_latency / self.total_accesses

    def audit_commands(self) -> list[str]:
        """Replay the command log against tRCD/tRP/tRRD; returns violations."""
        problems: list[str] = []
        per_bank: dict[tuple[str, int], list[Command]] = {}
        per_region: dict[str, list[Command]] = {}
        timing = {r.name: r.timing for r in self.regions}
        for c in self.commands:
            per_bank.setdefault((c.region, c.bank), []).append(c)
            per_region.setdefault(c.region, []).append(c)
        for (rname, bank), cmds in per_bank.items():
            t = timing[rname]
            last: dict[str, int] = {}
            for c in cmds:
                if c.op == "ACT" and "PRE" in last and c.cycle - last["PRE"] < t.trp:
                    problems.append(f"{rname} bank {bank}: ACT {c.cycle} within tRP of PRE {last['PRE']}")
                if c.op in ("RD", "WR") and "ACT" in last and c.cycle - last["ACT"] < t.trcd:
                    problems.append(f"{rname} bank {bank}: {c.op} {c.cycle} within tRCD of ACT {last['ACT']}")
                last[c.op] = c.cycle
        for rname, cmds in per_region.items():
            t = timing[rname]
            last_act = last_pre = None
            for c in cmds:
                if c.op == "ACT":
                    if last_act is not None and c.cycle - last_act < t.trrd_act:
                        problems.append(f"{rname}: ACT {c.cycle} within tRRDact of {last_act}")
                    last_act = c.cycle
                elif c.op == "PRE":
                    if last_pre is not None and c.cycle - last_pre < t.trrd_pre:
                        problems.append(f"{rname}: PRE {c.cycle} within tRRDpre of {last_pre}")
                    last_pre = c.cycle
        return problems


class PlacementPolicy:
    """Decides the home region of each VB and drives epoch migration.

    aware: property hints place latency-sensitive VBs in the fast region;
    per-epoch access counts migrate the hottest VBs in.  unaware: round
    robin over regions, blind to access counts.  ideal: whole-trace
    access counts known up front, no mid-run migration.
    """

    def __init__(self, policy: str, mm: MemoryManager, device: MemoryDevice,
                 stats: Stats, fast_region: int = 0,
                 epoch_cycles: int = 10_000_000,
                 oracle_counts: dict | None = None,
                 chunk_blocks: int = 1024):
        if policy not in ("aware", "unaware", "ideal"):
            raise ValueError(f"unknown placement policy {policy!r}")
        self.policy = policy
        self.mm = mm
        self.device = device
        self.stats = stats
        self.fast = fast_region
        self.epoch_cycles = epoch_cycles
        self.oracle_counts = oracle_counts or {}
        self.chunk_blocks = chunk_blocks  # staging unit for oversized VBs
        self.rr_next = 0
        self.fast_budget_frames = mm.regions[fast_region].nframes
        self.fast_used_of: dict[Vbuid, int] = {}
        self.epoch_counts: dict[Vbuid, int] = {}
        self.next_epoch = epoch_cycles
        self._oracle_fast: set | None = None
        self._staged: list[Vbuid] = []  # oversized VBs mid-migration

    @property
    def fast_used_frames(self) -> int:
        return sum(self.fast_used_of.values())

    @property
    def resident_fast(self):
        return set(self.fast_used_of)

    def vb_frames(self, vbuid: Vbuid) -> int:
        return vbuid.size_class.size_bytes // FRAME_BYTES

    def _budget_frames(self, vbuid: Vbuid) -> int:
        """Fast-capacity charge: whole class size for VBs that fit, the
        allocated footprint (chunk-migrated) for oversized ones."""
        frames = self.vb_frames(vbuid)
        if frames <= self.fast_budget_frames:
            return frames
        log = self.mm.alloc_log.get(vbuid)
        return len(log) if log else 1

    def place_vb(self, vbuid: Vbuid, props, count_key=None) -> int:
        """Home-region decision at a VB's first allocation."""
        region = self._decide(vbuid, props, count_key)
        self.mm.vb_home[vbuid] = region
        if region == self.fast and len(self.device.regions) > 1:
            self.fast_used_of[vbuid] = self._budget_frames(vbuid)
        self.stats.bump(f"place.{self.device.regions[region].name}")
        return region

    def on_disable(self, vbuid: Vbuid) -> None:
        self.fast_used_of.pop(vbuid, None)
        if vbuid in self._staged:
            self._staged.remove(vbuid)

    def _decide(self, vbuid: Vbuid, props, count_key) -> int:
        slow = 1 if self.fast == 0 else 0
        if len(self.device.regions) == 1:
            return 0
        if self.policy == "unaware":
            region = self.rr_next % len(self.device.regions)
            self.rr_next += 1
            if region == self.fast and not self._fast_fits(vbuid):
                return slow
            return region
        if self.policy == "ideal":
            if self._oracle_fast is None:
                self._oracle_fast = self._plan_oracle()
            if count_key in self._oracle_fast and self._fast_fits(vbuid):
                return self.fast
            return slow
        # aware: fast region while budget remains (hinted VBs share the same
        # greedy path); epoch migration corrects mistakes afterwards
        if self._fast_fits(vbuid):
            return self.fast
        return slow

    def _fast_fits(self, vbuid: Vbuid) -> bool:
        # placement charges the whole class size, so an oversized VB is
        # never homed in the fast region up front (migration chunks it in)
        return (self.fast_used_frames + self.vb_frames(vbuid)
                <= self.fast_budget_frames)

    def _plan_oracle(self) -> set:
        """Greedy knapsack of whole-trace access density into the fast region."""
        chosen: set = set()
        frames_left = self.fast_budget_frames
        ranked = sorted(self.oracle_counts.items(),
                        key=lambda kv: (-kv[1][0] / max(1, kv[1][1]), kv[0]))
        for key, (count, frames) in ranked:
            if count and frames <= frames_left:
                chosen.add(key)
                frames_left -= frames
        return chosen

    def note_access(self, vbuid: Vbuid) -> None:
        self.epoch_counts[vbuid] = self.epoch_counts.get(vbuid, 0) + 1

    def maybe_migrate(self, now_cycles: int, registry) -> list[tuple[Vbuid, int]]:
        """At each epoch boundary (aware policy only), migrate the hottest
        VBs into the fast region, coldest out first to make space."""
        if now_cycles < self.next_epoch:
            return []
        while self.next_epoch <= now_cycles:
            self.next_epoch += self.epoch_cycles
        if self.policy != "aware" or len(self.device.regions) == 1:
            self.epoch_counts.clear()
            return []
        self._move_now = now_cycles
        moves = self._plan_epoch(registry)
        self.epoch_counts.clear()
        return moves

    def _plan_epoch(self, registry) -> list[tuple[Vbuid, int]]:
        moved: list[tuple[Vbuid, int]] = []
        for vb in list(self._staged):  # continue oversized migrations first
            if self._move(vb, self.mm.vb_home[vb], registry, staged=True):
                self._staged.remove(vb)
            moved.append((vb, self.mm.vb_home[vb]))
        if not self.epoch_counts:
            return moved
        density = {
            vb: self.epoch_counts[vb] / max(1, self.vb_frames(vb) * 4)
            for vb in self.epoch_counts
        }
        ranked = sorted(density, key=lambda vb: (-density[vb], vb))
        for vb in ranked:
            if vb in self.fast_used_of:
                continue
            entry = registry.get(vb)
            if entry is None or not entry.enabled:
                continue
            needed = self._budget_frames(vb)
            if needed > self.fast_budget_frames:
                continue
            evict = []
            free = self.fast_budget_frames - self.fast_used_frames
            if needed > free:
                cold = sorted(self.fast_used_of,
                              key=lambda v: (density.get(v, 0.0), v))
                for v in cold:
                    if density.get(v, 0.0) >= density[vb]:
                        break
                    evict.append(v)
                    free += self.fast_used_of[v]
                    if free >= needed:
                        break
            if free < needed:
                continue
            for v in evict:
                if not self._move(v, 1 - self.fast, registry):
                    self._staged.append(v)
                moved.append((v, 1 - self.fast))
            if not self._move(vb, self.fast, registry):
                self._staged.append(vb)
            moved.append((vb, self.fast))
        return moved

    def _move(self, vbuid: Vbuid, region_idx: int, registry,
              staged: bool = False) -> bool:
        """Re-home a VB and copy its allocated frames into the new region.

        Oversized VBs move at most `chunk_blocks` frames per epoch and
        report False until the copy is complete.
        """
        entry = registry.get(vbuid)
        self.mm.vb_home[vbuid] = region_idx
        if region_idx == self.fast:
            self.fast_used_of[vbuid] = self._budget_frames(vbuid)
        else:
            self.fast_used_of.pop(vbuid, None)
        if entry is None or entry.structure is None:
            return True
        st = entry.structure
        if st.kind is StructKind.DIRECT:
            if vbuid.size_id != 0:
                self.mm._break_direct(entry)
            else:
                st.base_frame = None  # re-set below from the moved frame
        limit = self.chunk_blocks \
            if self.vb_frames(vbuid) > self.chunk_blocks else None
        target = self.mm.regions[region_idx]
        now = getattr(self, "_move_now", 0)
        moved_blocks = 0
        done = True
        for block in sorted(st.blocks):
            m = st.blocks[block]
            if m.state is not BlockState.ALLOCATED:
                continue
            old = st.frame_of(block)
            if self.mm.region_of_frame(old) == region_idx:
                continue
            if self.mm.frame_sharers.get(old, 1) > 1:
                continue  # shared frames stay put
            if limit is not None and moved_blocks >= limit:
                done = False
                break
            new = target.alloc(0, owner=vbuid)
            if new is None:
                break
            self.device.service(old * FRAME_BYTES, "r", now)
            self.device.service(new * FRAME_BYTES, "w", now)
            self.mm._release_frame(vbuid, old)
            m.frame = new
            if st.kind is StructKind.DIRECT and st.base_frame is None:
                st.base_frame = new - block
            if self.mm.on_unmap is not None:
                self.mm.on_unmap(vbuid, block)
            moved_blocks += 1
            self.stats.bump("migration.blocks")
        if not staged:
            self.stats.bump("migrations")
        return done
