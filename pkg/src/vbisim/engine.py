"""Scenario orchestration: replays a trace through protection, caches,
translation, allocation, and the memory device under one of the
configured scenarios, with a simplified limited-outstanding-miss core.

Time is kept in integer quarter-cycles: one non-memory instruction costs
one quarter-cycle (a 4-wide-issue proxy), and all cycle-denominated
latencies are scaled by four.  Everything is deterministic for a given
(trace, config, scenario).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

from .addrspace import CapacityError, Vbuid, decode_vbuid
from .caches import CacheHierarchy, Writeback
from .config import Config
from .device import DeviceRegion, MemoryDevice, PlacementPolicy
from .physmem import FRAME_BYTES, BuddyRegion, MemoryManager, OutOfMemory
from .protection import ProtectionFault, ProtectionUnit, parse_rwx
from .registry import LifecycleError, Registry
from .stats import Stats
from .trace import Lifecycle, Mem
from .translate import (BlockState, MtlTranslator, Outcome, X86Walker)

QC = 4  # quarter-cycles per cycle; 1 instruction = 1 quarter-cycle
LINE = 64
USER_VA_LIMIT = 1 << 47


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    family: str  # baseline | vbi
    walk_mode: str | None = None
    perfect_tlb: bool = False
    translate_at: str = "core"  # core | llc
    big_pages: bool = False
    delayed_alloc: bool = False
    early_reservation: bool = False
    het: str | None = None  # pcm_dram | tldram


SCENARIOS: dict[str, ScenarioSpec] = {
    "native": ScenarioSpec("native", "baseline", "native4k"),
    "native2m": ScenarioSpec("native2m", "baseline", "native2m", big_pages=True),
    "virtual": ScenarioSpec("virtual", "baseline", "nested4k"),
    "virtual2m": ScenarioSpec("virtual2m", "baseline", "nested2m", big_pages=True),
    "perfect_tlb": ScenarioSpec("perfect_tlb", "baseline", "native4k",
                                perfect_tlb=True),
    "vivt": ScenarioSpec("vivt", "baseline", "native4k", translate_at="llc"),
    "vbi1": ScenarioSpec("vbi1", "vbi"),
    "vbi2": ScenarioSpec("vbi2", "vbi", delayed_alloc=True),
    "vbifull": ScenarioSpec("vbifull", "vbi", delayed_alloc=True,
                            early_reservation=True),
    "het_pcm_dram": ScenarioSpec("het_pcm_dram", "vbi", delayed_alloc=True,
                                 early_reservation=True, het="pcm_dram"),
    "het_tldram": ScenarioSpec("het_tldram", "vbi", delayed_alloc=True,
                               early_reservation=True, het="tldram"),
}


class LifecycleViolation(Exception):
    def __init__(self, event_index: int, cause: str):
        super().__init__(f"event {event_index}: {cause}")
        self.event_index = event_index


def _power_floor(n: int) -> int:
    return 1 << (n.bit_length() - 1) if n > 0 else 0


class Machine:
    def __init__(self, config: Config, scenario: str, policy: str = "aware",
                 oracle_counts: dict | None = None, trace_name: str = ""):
        if scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {scenario!r}")
        self.cfg = config
        self.spec = SCENARIOS[scenario]
        self.policy_name = policy if self.spec.het else "-"
        self.trace_name = trace_name
        self.stats = Stats()

        self.tq = 0
        self.outstanding: deque[int] = deque()
        self.instructions = 0
        self._warmup_done = config.warmup_instructions == 0
        self._base_tq = 0
        self._base_instr = 0

        self._build_memory()
        self.registry = Registry(self.stats, vm_mode=config.vm_mode,
                                 vm_id=config.vm_id,
                                 scrub_lines_per_cycle=config.scrub_lines_per_cycle)
        self.prot = ProtectionUnit(self.registry, self.stats)
        self.caches = CacheHierarchy(config.cache_configs(), self.stats)

        self.mtl: MtlTranslator | None = None
        self.walker: X86Walker | None = None
        if self.spec.family == "vbi":
            self.mtl = MtlTranslator(config.tlb_geometry(), self.stats,
                                     config.walk_access_cycles,
                                     config.vit_cache_entries)
            self.mm.on_unmap = self._on_unmap
        else:
            self.walker = X86Walker(self.spec.walk_mode, config.tlb_geometry(),
                                    self.stats, self._baseline_alloc,
                                    config.walk_access_cycles,
                                    config.fault_cycles,
                                    perfect_tlb=self.spec.perfect_tlb)

        self.policy: PlacementPolicy | None = None
        if self.spec.het:
            self.policy = PlacementPolicy(policy, self.mm, self.device,
                                          self.stats, fast_region=0,
                                          epoch_cycles=config.epoch_cycles * QC,
                                          oracle_counts=oracle_counts)
            self.mm.place_hook = self._place_vb

        # baseline virtual-address layout
        self._next_va: dict[int, int] = {}
        self.vb_range: dict[Vbuid, tuple[int, int, int]] = {}  # (client, base, size)
        self.cvt_vaddr: dict[tuple[int, int], int] = {}
        self._pending_clone: dict[Vbuid, Vbuid] = {}  # dst -> src (baseline copy)

    # -- construction --

    def _build_memory(self) -> None:
        cfg = self.cfg
        total = cfg.pool_frames()
        regions: list[DeviceRegion] = []
        if self.spec.het == "pcm_dram":
            fast = _power_floor(int(total * cfg.pcm_dram_fast_fraction))
            regions = [
                DeviceRegion("dram", "dram", cfg.dram_timing(QC), BuddyRegion(0, fast)),
                DeviceRegion("pcm", "pcm", cfg.pcm_timing(QC),
                             BuddyRegion(fast, total - fast)),
            ]
        elif self.spec.het == "tldram":
            fast = _power_floor(int(total * cfg.tldram_fast_fraction))
            regions = [
                DeviceRegion("tl_fast", "tl_fast", cfg.tl_fast_timing(QC),
                             BuddyRegion(0, fast)),
                DeviceRegion("tl_slow", "tl_slow", cfg.dram_timing(QC),
                             BuddyRegion(fast, total - fast)),
            ]
        else:
            regions = [DeviceRegion("dram", "dram", cfg.dram_timing(QC),
                                    BuddyRegion(0, total))]
        self.device = MemoryDevice(regions, self.stats,
                                   record_commands=cfg.audit_device)
        self.mm = MemoryManager([r.buddy for r in regions], self.stats,
                                early_reservation=self.spec.early_reservation)

    def _place_vb(self, entry) -> None:
        self.policy.place_vb(entry.vbuid, entry.props, count_key=entry.vbuid)

    def _on_unmap(self, vbuid: Vbuid, block: int | None) -> None:
        if self.mtl is None:
            return
        if block is None:
            self.mtl.invalidate_vb(vbuid)
        else:
            self.mtl.invalidate_block(vbuid, block)

    def _baseline_alloc(self, order: int) -> int:
        return self.mm.alloc_plain(order)

    # -- core timing --

    def _advance(self, icount: int) -> None:
        self.tq += icount
        self.instructions += icount

    def _mlp_gate(self) -> None:
        out = self.outstanding
        while out and out[0] <= self.tq:
            out.popleft()
        if len(out) >= self.cfg.mlp_limit:
            head = out.popleft()
            if head > self.tq:
                self.stats.bump("core.mlp_stall_qcycles", head - self.tq)
                self.tq = head
            while out and out[0] <= self.tq:
                out.popleft()

    def _maybe_finish_warmup(self) -> None:
        if self._warmup_done or self.instructions < self.cfg.warmup_instructions:
            return
        self._warmup_done = True
        self.stats.reset()
        self._base_tq = self.tq
        self._base_instr = self.instructions

    # -- main loop --

    def run(self, events: list) -> dict:
        for i, ev in enumerate(events):
            try:
                if isinstance(ev, Mem):
                    self._mem(ev)
                else:
                    self._lifecycle(ev)
            except (LifecycleError, CapacityError, OutOfMemory) as e:
                raise LifecycleViolation(i, str(e)) from e
            self._maybe_finish_warmup()
        if self.cfg.drain_at_end:
            self._drain()
        if self.outstanding:
            self.tq = max(self.tq, max(self.outstanding))
            self.outstanding.clear()
        return self.report()

    # -- memory events --

    def _mem(self, ev: Mem) -> None:
        self._advance(ev.icount)
        self._mlp_gate()
        self.stats.bump("mem.accesses")
        self.stats.bump("mem.reads" if ev.kind == "r" else "mem.writes")
        if self.spec.family == "vbi":
            completion = self._mem_vbi(ev)
        else:
            completion = self._mem_baseline(ev)
        if completion is not None:
            self.outstanding.append(completion)
        if self.policy is not None:
            self.policy.maybe_migrate(self.tq, self.registry)

    def _mem_vbi(self, ev: Mem) -> int | None:
        try:
            raw, cvt_hit = self.prot.check_and_form_address(
                ev.client, ev.cvt_index, ev.offset, ev.kind)
        except ProtectionFault:
            return None  # counted; the access never issues
        lat = 0
        if not cvt_hit:
            lat = self.cfg.cvt_miss_cycles * QC
            self.stats.bump("cvt_cache.penalty_cycles", self.cfg.cvt_miss_cycles)
        vbuid, off = decode_vbuid(raw, self.cfg.vm_mode)
        if self.policy is not None:
            self.policy.note_access(vbuid)

        res = self.caches.access(0, raw, ev.kind, vbuid=vbuid)
        lat += res.latency * QC
        if res.hit_level is not None:
            for wb in res.writebacks:
                self._writeback_vbi(wb, self.tq + lat)
            return self.tq + lat

        entry = self.registry.get_enabled(vbuid)
        block = off // FRAME_BYTES
        tr = self.mtl.translate(entry, block)
        self.stats.bump("translation.calls")
        trans = tr.latency * QC
        if self.cfg.mtl_overlap_l3:
            trans = max(0, trans - self.cfg.l3_latency * QC)
        lat += trans

        zero = False
        completion = None
        if tr.outcome is Outcome.OK:
            paddr = tr.frame * FRAME_BYTES + off % FRAME_BYTES
            completion = self.device.service(paddr - paddr % LINE, "r",
                                             self.tq + lat)
        elif tr.outcome is Outcome.SWAPPED_OUT:
            frame = self.mm.swap_in(entry, block)
            lat += self.cfg.swap_in_cycles * QC
            paddr = frame * FRAME_BYTES + off % FRAME_BYTES
            completion = self.device.service(paddr - paddr % LINE, "r",
                                             self.tq + lat)
        elif self.spec.delayed_alloc:
            # never-touched region: a zero line, no frame, no device access
            zero = True
            if ev.kind == "r":
                self.stats.bump("zero_line.reads")
            completion = self.tq + lat
        else:
            frame = self.mm.ensure_backed(entry, block, reason="demand")
            paddr = frame * FRAME_BYTES + off % FRAME_BYTES
            completion = self.device.service(paddr - paddr % LINE, "r",
                                             self.tq + lat)

        wbs = self.caches.fill(0, raw, ev.kind, zero_filled=zero, vbuid=vbuid)
        for wb in wbs:
            self._writeback_vbi(wb, self.tq + lat)
        return completion

    def _writeback_vbi(self, wb: Writeback, now: int) -> int:
        vbuid = wb.vbuid
        raw = wb.key[1] * LINE
        _, off = decode_vbuid(raw, self.cfg.vm_mode)
        entry = self.registry.get(vbuid)
        if entry is None or not entry.enabled:
            return now  # VB died with dirty lines still queued; drop them
        block = off // FRAME_BYTES
        st = entry.structure
        m = st.lookup(block) if st is not None else None
        if m is not None and m.cow:
            old = st.frame_of(block)
            frame, copied = self.mm.resolve_cow(entry, block)
            if copied:
                self.device.service(old * FRAME_BYTES, "r", now)
                self.device.service(frame * FRAME_BYTES, "w", now)
        elif m is None or m.state in (BlockState.UNALLOCATED, BlockState.RESERVED):
            # allocation happens only now, when a dirty line leaves the LLC
            self.stats.bump("mtl.translations")
            self.stats.bump("translation.calls")
            frame = self.mm.ensure_backed(entry, block, reason="dirty_writeback")
        elif m.state is BlockState.SWAPPED_OUT:
            frame = self.mm.swap_in(entry, block)
        else:
            frame = st.frame_of(block)
        paddr = frame * FRAME_BYTES + off % FRAME_BYTES
        return self.device.service(paddr - paddr % LINE, "w", now)

    def _mem_baseline(self, ev: Mem) -> int | None:
        vaddr = self._vaddr(ev)
        lat = 0
        paddr = None
        if self.spec.translate_at == "core":
            paddr, _, cyc = self.walker.translate(ev.client, vaddr)
            self.stats.bump("translation.calls")
            lat += cyc * QC
        res = self.caches.access(ev.client, vaddr, ev.kind)
        lat += res.latency * QC
        if res.hit_level is not None:
            for wb in res.writebacks:
                self._writeback_baseline(wb, self.tq + lat)
            return self.tq + lat
        if paddr is None:  # translation deferred to the LLC boundary
            paddr, _, cyc = self.walker.translate(ev.client, vaddr)
            self.stats.bump("translation.calls")
            lat += cyc * QC
        completion = self.device.service(paddr - paddr % LINE, "r", self.tq + lat)
        wbs = self.caches.fill(ev.client, vaddr, ev.kind, zero_filled=False)
        for wb in wbs:
            self._writeback_baseline(wb, self.tq + lat)
        return completion

    def _writeback_baseline(self, wb: Writeback, now: int) -> int:
        client, line = wb.key
        paddr = self.walker.resolve(client, line * LINE)
        return self.device.service(paddr - paddr % LINE, "w", now)

    def _vaddr(self, ev: Mem) -> int:
        base = self.cvt_vaddr.get((ev.client, ev.cvt_index))
        if base is None:
            raise LifecycleError(
                f"client {ev.client} index {ev.cvt_index} has no attached VB")
        return base + ev.offset

    # -- lifecycle events --

    def _lifecycle(self, ev: Lifecycle) -> None:
        handler = getattr(self, f"_op_{ev.op.lower()}")
        handler(ev)

    def _normalize(self, vbuid: Vbuid) -> Vbuid:
        if not self.cfg.vm_mode:
            if vbuid.vm_id:
                raise LifecycleError(f"{vbuid}: VM id given but VM mode is off")
            return vbuid
        if vbuid.vm_id == 0:
            return Vbuid(vbuid.size_id, vbuid.vbid, self.cfg.vm_id)
        if vbuid.vm_id != self.cfg.vm_id:
            raise LifecycleError(
                f"{vbuid}: VM id differs from the configured {self.cfg.vm_id}")
        return vbuid

    def _op_reqvb(self, ev: Lifecycle) -> None:
        vbuid = self.registry.pick_class_and_vbid(ev.size, self.tq)
        entry = self.registry.enable_vb(vbuid, ev.props)
        self.mm.register(entry)
        idx = self.prot.attach(ev.client, vbuid, ev.props.perms())
        self._assign_range(ev.client, idx, vbuid)

    def _op_enable(self, ev: Lifecycle) -> None:
        vbuid = self._normalize(ev.vbuid)
        stall = self.registry.scrubber.wait_for(vbuid, self.tq)
        if stall:
            self.tq += stall
            self.stats.bump("scrub.stall_qcycles", stall)
        entry = self.registry.enable_vb(vbuid, ev.props)
        self.mm.register(entry)

    def _op_attach(self, ev: Lifecycle) -> None:
        vbuid = self._normalize(ev.vbuid)
        idx = self.prot.attach(ev.client, vbuid, parse_rwx(ev.rwx))
        self._assign_range(ev.client, idx, vbuid)

    def _op_detach(self, ev: Lifecycle) -> None:
        self.prot.detach(ev.client, self._normalize(ev.vbuid))

    def _op_disable(self, ev: Lifecycle) -> None:
        vbuid = self._normalize(ev.vbuid)
        entry = self.registry.disable_vb(vbuid)
        self.mm.release_vb(entry)
        lines = self.caches.invalidate_vb(vbuid)
        if self.spec.family == "vbi":
            self.registry.scrubber.schedule(vbuid, lines, self.tq)
            self.mtl.invalidate_vb(vbuid)
        if self.policy is not None:
            self.policy.on_disable(vbuid)

    def _op_clone(self, ev: Lifecycle) -> None:
        src, dst = self._normalize(ev.vbuid), self._normalize(ev.vbuid2)
        self.registry.clone_vb(src, dst, self.mm)
        if self.spec.family == "baseline":
            if dst in self.vb_range:
                self._baseline_copy(src, dst)
            else:
                self._pending_clone[dst] = src

    def _op_promote(self, ev: Lifecycle) -> None:
        src, dst = self._normalize(ev.vbuid), self._normalize(ev.vbuid2)
        if self.spec.family == "vbi":
            wbs = self.caches.flush_vb_dirty(src)
            for wb in wbs:
                self._writeback_vbi(wb, self.tq)
            self.stats.bump("promote.dirty_flushed", len(wbs))
            self.caches.invalidate_vb(src)
            self.registry.promote_graft(src, dst, self.mm)
            self.prot.repoint(ev.client, src, dst)
            self.mtl.invalidate_vb(src)
        else:
            self.registry.promote_graft(src, dst, self.mm)
            idx = self.prot.repoint(ev.client, src, dst)
            self._assign_range(ev.client, idx, dst)
            self._baseline_copy(src, dst)
            self.cvt_vaddr[(ev.client, idx)] = self.vb_range[dst][1]

    # -- baseline layout --

    def _assign_range(self, client: int, idx: int, vbuid: Vbuid) -> None:
        if vbuid in self.vb_range:
            self.cvt_vaddr[(client, idx)] = self.vb_range[vbuid][1]
            return
        align = (2 << 20) if self.spec.big_pages else FRAME_BYTES
        base = self._next_va.get(client, 0x10000)
        base = (base + align - 1) // align * align
        size = vbuid.size_class.size_bytes
        if base + size > USER_VA_LIMIT:
            raise CapacityError(
                f"client {client} virtual address space exhausted at {base:#x}")
        self._next_va[client] = base + size
        self.vb_range[vbuid] = (client, base, size)
        self.cvt_vaddr[(client, idx)] = base
        if vbuid in self._pending_clone:
            self._baseline_copy(self._pending_clone.pop(vbuid), vbuid)

    def _baseline_copy(self, src: Vbuid, dst: Vbuid) -> None:
        """OS copy between two ranges (fork or promotion fallback path)."""
        if self.spec.family != "baseline":
            return
        if src not in self.vb_range or dst not in self.vb_range:
            return
        sclient, sbase, ssize = self.vb_range[src]
        dclient, dbase, _ = self.vb_range[dst]
        pb = self.walker.page_bits
        table = self.walker.tables.get(sclient)
        if table is None:
            return
        lo, hi = sbase >> pb, (sbase + ssize) >> pb
        for vpn in sorted(v for v in table.leaves if lo <= v < hi):
            src_paddr = self.walker.resolve(sclient, vpn << pb)
            dst_vaddr = dbase + ((vpn << pb) - sbase)
            dst_paddr = self.walker.resolve(dclient, dst_vaddr)
            self.device.service(src_paddr, "r", self.tq)
            self.device.service(dst_paddr, "w", self.tq)
            self.stats.bump("baseline.copied_pages")

    # -- drain and reporting --

    def _drain(self) -> None:
        # end-of-run accounting: sequential so bank queues stay sane
        now = self.tq
        for wb in self.caches.drain():
            if self.spec.family == "vbi":
                now = self._writeback_vbi(wb, now)
            else:
                now = self._writeback_baseline(wb, now)

    def cycles(self) -> float:
        return (self.tq - self._base_tq) / QC

    def report(self) -> dict:
        s = self.stats
        cycles = self.cycles()
        instructions = self.instructions - self._base_instr
        s.put("cycles", cycles)
        s.put("instructions", float(instructions))
        s.put("ipc", instructions / cycles if cycles else 0.0)
        s.put("device.avg_access_latency",
              self.device.avg_access_latency() / QC)
        s.put("cvt_cache.hit_rate_warm",
              self.prot.cvt_cache.hit_rate_after_warmup())
        for region in self.device.regions:
            for i, bank in enumerate(region.banks):
                total = bank.row_hits + bank.row_misses
                if total:
                    s.put(f"device.{region.name}.bank{i}.row_hit_rate",
                          bank.row_hits / total)
        if self.cfg.audit_device:
            s.put("device.audit_violations",
                  float(len(self.device.audit_commands())))
        header = {
            "trace": self.trace_name,
            "scenario": self.spec.name,
            "policy": self.policy_name,
        }
        doc = dict(header)
        doc.update(s.to_dict())
        return doc


def collect_vb_access_counts(events: list, config: Config) -> dict:
    """Pre-pass for the oracle placement policy: whole-trace access count
    and frame footprint per VB, replaying only the lifecycle logic."""
    stats = Stats()
    registry = Registry(stats, vm_mode=config.vm_mode, vm_id=config.vm_id)
    prot = ProtectionUnit(registry, stats)
    mm = MemoryManager([BuddyRegion(0, 1)], stats)
    counts: dict[tuple[int, int], int] = {}
    keys: dict[tuple[int, int], Vbuid] = {}
    for ev in events:
        try:
            if isinstance(ev, Mem):
                key = (ev.client, ev.cvt_index)
                counts[key] = counts.get(key, 0) + 1
                t = prot.tables.get(ev.client)
                if t and 0 <= ev.cvt_index < len(t.entries):
                    e = t.entries[ev.cvt_index]
                    if e.valid:
                        keys[key] = e.vbuid
            elif ev.op == "REQVB":
                vbuid = registry.pick_class_and_vbid(ev.size, 0)
                registry.enable_vb(vbuid, ev.props)
                prot.attach(ev.client, vbuid, ev.props.perms())
            elif ev.op == "ENABLE":
                registry.enable_vb(ev.vbuid, ev.props)
            elif ev.op == "ATTACH":
                prot.attach(ev.client, ev.vbuid, parse_rwx(ev.rwx))
            elif ev.op == "DETACH":
                prot.detach(ev.client, ev.vbuid)
            elif ev.op == "DISABLE":
                registry.disable_vb(ev.vbuid)
            elif ev.op == "CLONE":
                registry.clone_vb(ev.vbuid, ev.vbuid2, mm)
            elif ev.op == "PROMOTE":
                registry.promote_graft(ev.vbuid, ev.vbuid2, mm)
                prot.repoint(ev.client, ev.vbuid, ev.vbuid2)
        except (LifecycleError, CapacityError):
            continue  # the timed run will report it properly
    out: dict = {}
    for key, count in counts.items():
        vb = keys.get(key)
        if vb is None:
            continue
        frames = vb.size_class.size_bytes // FRAME_BYTES
        prev = out.get(vb, (0, frames))
        out[vb] = (prev[0] + count, frames)
    return out


def run_simulation(events: list, config: Config, scenario: str,
                   policy: str = "aware", trace_name: str = "") -> dict:
    oracle = None
    if SCENARIOS[scenario].het and policy == "ideal":
        oracle = collect_vb_access_counts(events, config)
    machine = Machine(config, scenario, policy=policy, oracle_counts=oracle,
                      trace_name=trace_name)
    return machine.run(events)


def report_to_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
