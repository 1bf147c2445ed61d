"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v` (add -s to see the PASS
lines inline).  Tolerances are exact unless a criterion states a bound.
"""

import random
import sys

from vbisim import addrspace as a
from vbisim.addrspace import Vbuid
from vbisim.config import Config
from vbisim.engine import Machine, report_to_json, run_simulation
from vbisim.physmem import UNRESERVED, BuddyRegion, MemoryManager
from vbisim.registry import Props, Registry
from vbisim.stats import Stats
from vbisim.trace import Lifecycle, Mem, generate_trace
from vbisim.translate import (MtlTranslator, StructKind, TlbGeometry,
                              X86Walker)


def note(line: str) -> None:
    print(line, file=sys.__stderr__)


def cfg(**kw) -> Config:
    c = Config()
    for k, v in kw.items():
        setattr(c, k, v)
    return c


# -- criterion: address codec round-trip and field widths --

def test_criterion_address_codec():
    rng = random.Random(0xC0DEC)
    for _ in range(1_000_000):
        size_id = rng.randrange(8)
        cls = a.SIZE_CLASSES[size_id]
        vm_mode = rng.random() < 0.25
        vbid = rng.randrange(1 << cls.vbid_bits(vm_mode))
        offset = rng.randrange(cls.size_bytes)
        vm_id = rng.randrange(32) if vm_mode else 0
        raw = a.encode(size_id, vbid, offset, vm_id, vm_mode)
        assert a.decode(raw, vm_mode) == (size_id, vm_id, vbid, offset)
    assert a.SIZE_CLASSES[0].vbid_bits() == 49
    assert a.SIZE_CLASSES[7].vbid_bits() == 14
    cls4g = a.SIZE_CLASSES[4]
    assert (cls4g.offset_bits, cls4g.vbid_bits(vm_mode=True)) == (32, 24)
    raw = a.encode(4, 0x123456, 0xCAFEBABE, vm_id=17, vm_mode=True)
    assert raw >> 61 == 4
    assert (raw >> 56) & 0x1F == 17
    assert (raw >> 32) & 0xFFFFFF == 0x123456
    assert raw & 0xFFFFFFFF == 0xCAFEBABE
    note("[PASS] address codec: 10^6 round-trips, 49/14 vbid bits, 3/5/24/32 VM split")


# -- criterion: nested and native walk access counts --

def test_criterion_walk_counts():
    def walker(mode):
        stats = Stats()
        mm = MemoryManager([BuddyRegion(0, 1 << 16)], stats)
        return X86Walker(mode, TlbGeometry(), stats, mm.alloc_plain, 10, 2000)

    w = walker("nested4k")
    w.translate(0, 0x7654321000)
    w.flush_caches()
    _, accesses, _ = w.translate(0, 0x7654321000)
    assert accesses == 24

    w = walker("native4k")
    w.translate(0, 0x42000)
    w.flush_caches()
    _, accesses, _ = w.translate(0, 0x42000)
    assert accesses == 4

    w = walker("native2m")
    w.translate(0, 0x42000000)
    w.flush_caches()
    _, accesses, _ = w.translate(0, 0x42000000)
    assert accesses == 3
    note("[PASS] walk counts: nested4k=24, native4k=4, native2m=3 (cold)")


# -- criterion: VBI structure walk depths --

def test_criterion_vbi_walk_depths():
    want = {0: 0, 1: 1, 2: 1, 3: 2, 4: 3, 7: 4}
    for sid, depth in want.items():
        stats = Stats()
        reg = Registry(stats)
        nframes = max(64, 2 * (a.SIZE_CLASSES[sid].size_bytes // 4096))
        mm = MemoryManager([BuddyRegion(0, nframes)], stats)
        e = reg.enable_vb(Vbuid(sid, 0), Props())
        mm.register(e)
        mm.ensure_backed(e, 0)
        mtl = MtlTranslator(TlbGeometry(), stats, 10)
        res = mtl.translate(e, 0)
        assert res.walk_accesses == depth, f"class {sid}"
    # early reservation turns every class into a direct, walk-free mapping
    for sid in range(8):
        stats = Stats()
        reg = Registry(stats)
        nframes = max(64, 2 * (a.SIZE_CLASSES[sid].size_bytes // 4096))
        mm = MemoryManager([BuddyRegion(0, nframes)], stats,
                           early_reservation=True)
        e = reg.enable_vb(Vbuid(sid, 0), Props())
        mm.register(e)
        mm.ensure_backed(e, 0)
        assert e.structure.kind is StructKind.DIRECT
        mtl = MtlTranslator(TlbGeometry(), stats, 10)
        res = mtl.translate(e, 0)
        assert res.walk_accesses == 0, f"early-reserved class {sid}"
    note("[PASS] VBI walk depths: 0/1/1/2/3/4 by class; early-reserved = 0")


# -- criterion: buddy allocator vs. brute-force bitmap oracle --

def test_criterion_buddy_oracle():
    rng = random.Random(0xB0DD7)
    region = BuddyRegion(0, 256)
    frames = [False] * 256
    live = {}
    for step in range(10_000):
        if live and rng.random() < 0.45:
            start = rng.choice(sorted(live))
            order = live.pop(start)
            region.free(start)
            for f in range(start, start + (1 << order)):
                assert frames[f], f"step {step}: double free of {f}"
                frames[f] = False
        else:
            order = rng.choice([0, 0, 0, 1, 1, 2, 3])
            got = region.alloc(order)
            if got is None:
                assert all(
                    o < order for o, t in region.free_blocks.values()
                    if t is UNRESERVED), "refused although a block existed"
                continue
            live[got] = order
            for f in range(got, got + (1 << order)):
                assert not frames[f], f"step {step}: overlap at {f}"
                frames[f] = True
        assert region.check_conserved()
        assert region.allocated_frames() == sum(frames)
        if step % 500 == 0:
            for start, (order, tag) in region.free_blocks.items():
                buddy = start ^ (1 << order)
                assert region.free_blocks.get(buddy) != (order, tag), \
                    f"step {step}: unmerged buddies {start}/{buddy}"

    _priority_soundness(rng)
    note("[PASS] buddy oracle: 10^4 ops match bitmap; priority order sound")


def _priority_soundness(rng):
    """ensure_backed never takes a lower-priority block while a higher
    one is available."""
    stats = Stats()
    region = BuddyRegion(0, 256)
    mm = MemoryManager([region], stats)
    reg = Registry(stats)
    vbs = []  # 4 MB class: plenty of blocks to back
    for i in range(5):
        e = reg.enable_vb(Vbuid(2, i), Props())
        mm.register(e)
        vbs.append(e)
    owner = vbs[0]
    start = region.reserve(owner.vbuid, 7)  # half the pool reserved for vbs[0]
    assert start is not None
    from vbisim.physmem import ReservationRecord
    mm.reservations[owner.vbuid] = ReservationRecord(
        owner.vbuid, chunks=[(0, 128, start)], directly_mapped=False)

    classes_seen = set()
    for step in range(300):
        e = rng.choice(vbs)
        free_before = dict(region.free_blocks)
        own = any(t == e.vbuid for _, t in free_before.values())
        unres = any(t is UNRESERVED for _, t in free_before.values())
        foreign = any(t is not UNRESERVED and t != e.vbuid
                      for _, t in free_before.values())
        if not (own or unres or foreign):
            break
        frame = mm.ensure_backed(e, block=step)
        tag = None
        for s, (o, t) in free_before.items():
            if s <= frame < s + (1 << o):
                tag = t
                break
        if own:
            assert tag == e.vbuid, f"step {step}: skipped own reservation"
            classes_seen.add("own")
        elif unres:
            assert tag is UNRESERVED, f"step {step}: took foreign over unreserved"
            classes_seen.add("unreserved")
        else:
            assert tag is not UNRESERVED and tag != e.vbuid
            classes_seen.add("foreign")
    assert classes_seen == {"own", "unreserved", "foreign"}, classes_seen


# -- criterion: delayed allocation frugality --

def test_criterion_delayed_allocation():
    reads, writes = 100_000, 1_000
    events = [Lifecycle("REQVB", client=0, size=3 * 1024 ** 3, props=Props())]
    for i in range(writes):
        events.append(Mem("w", 0, 0, (reads + i) * 4096, 1))
    for i in range(reads):
        events.append(Mem("r", 0, 0, i * 4096, 1))
    config = cfg(pool_mb=1024)
    vbi2 = run_simulation(events, config, "vbi2")
    assert vbi2["frames.allocated"] == writes
    assert vbi2["zero_line.reads"] == reads
    assert vbi2.get("device.dram.reads", 0) == 0
    perfect = run_simulation(events, config, "perfect_tlb")
    assert vbi2["device.data_accesses"] < perfect["device.data_accesses"]
    note(f"[PASS] delayed allocation: {writes} frames for {writes} written regions, "
         f"0 device reads for {reads} cold reads, "
         f"{vbi2['device.data_accesses']} vs {perfect['device.data_accesses']} device accesses")


# -- criterion: CVT cache hit rate --

def test_criterion_cvt_cache_hit_rate():
    n_vbs, rounds = 48, 1200
    events = [Lifecycle("REQVB", client=0, size=4096, props=Props())
              for _ in range(n_vbs)]
    for _ in range(rounds):
        for i in range(n_vbs):
            events.append(Mem("r", 0, i, 0, 1))
    doc = run_simulation(events, cfg(pool_mb=64), "vbi2")
    rate = doc["cvt_cache.hit_rate_warm"]
    assert rate >= 0.999
    note(f"[PASS] CVT cache: warm hit rate {rate:.6f} >= 0.999 over {n_vbs} VBs")


# -- criterion: copy-on-write, cloning, promotion --

def test_criterion_cow_clone_promote():
    m = Machine(cfg(pool_mb=64), "vbi2")
    src, dst, big = Vbuid(1, 0), Vbuid(1, 1), Vbuid(2, 0)
    m.run([
        Lifecycle("REQVB", client=0, size=100_000, props=Props()),  # -> 1:0
        Mem("w", 0, 0, 0x1000, 1),
        Mem("w", 0, 0, 0x2000, 1),
    ])
    m._drain()  # force the dirty lines out so frames exist
    src_entry = m.registry.get(src)
    f1 = src_entry.structure.frame_of(1)
    assert f1 is not None

    # clone: both VBs see the same frame until one of them writes
    m.run([
        Lifecycle("ENABLE", vbuid=dst, props=Props()),
        Lifecycle("CLONE", vbuid=src, vbuid2=dst),
        Lifecycle("ATTACH", client=1, vbuid=dst, rwx="rw-"),
    ])
    dst_entry = m.registry.get(dst)
    assert dst_entry.structure.frame_of(1) == f1
    m.run([Mem("w", 1, 0, 0x1000, 1)])
    m._drain()  # dirty line leaves the cache, resolving the copy
    f_dst = dst_entry.structure.frame_of(1)
    assert f_dst != f1, "clone write must diverge"
    assert src_entry.structure.frame_of(1) == f1, "source keeps its frame"
    assert m.stats.get("cow.copies") == 1

    # promotion: dirty lines held for the source are flushed, low offsets
    # keep their frames, the region beyond the old size stays lazy
    m.run([Mem("w", 0, 0, 0x3000, 1), Mem("w", 0, 0, 0x4000, 1)])
    seen_dirty = set()
    for level in m.caches.levels:
        for key in level.lines_of_vb(src):
            line = level.peek(key)
            if line is not None and line.dirty:
                seen_dirty.add(key)
    m.run([
        Lifecycle("ENABLE", vbuid=big, props=Props()),
        Lifecycle("PROMOTE", client=0, vbuid=src, vbuid2=big),
    ])
    assert m.stats.get("promote.dirty_flushed") == len(seen_dirty)
    big_entry = m.registry.get(big)
    assert big_entry.structure.frame_of(1) == f1, "promoted mapping preserved"
    doc_faults = m.stats.get("fault.bounds")
    m.run([Mem("r", 0, 0, 200 * 1024, 1)])  # beyond the old 128 KB size
    assert m.stats.get("fault.bounds") == doc_faults
    assert m.stats.get("zero_line.reads") >= 1
    note("[PASS] clone/CoW diverges on write; promote preserves mappings, "
         f"flushed {len(seen_dirty)} dirty lines")


# -- criterion: scenario ordering over seeds --

def test_criterion_scenario_ordering():
    config = cfg(pool_mb=256)
    for seed in range(10):
        events = generate_trace("skew,vbs=8,n=6000,vb_kb=256,wfrac=0.3",
                                seed=seed)
        docs = {s: run_simulation(events, config, s)
                for s in ("perfect_tlb", "native", "virtual", "vivt",
                          "vbi1", "vbifull")}
        c = {s: d["cycles"] for s, d in docs.items()}
        assert c["perfect_tlb"] <= c["native"] <= c["virtual"], (seed, c)
        assert docs["vivt"]["translation.calls"] <= docs["vivt"]["cache.l3.miss"], seed
        assert docs["vbifull"].get("walk.accesses", 0) <= \
            docs["vbi1"].get("walk.accesses", 0), seed
    note("[PASS] scenario ordering: perfect<=native<=virtual cycles, "
         "vivt calls<=LLC misses, vbifull walks<=vbi1 walks (10 seeds)")


# -- criterion: heterogeneous policy ordering --

def test_criterion_heterogeneous_ordering():
    config = cfg(pool_mb=64, pcm_dram_fast_fraction=0.0625,
                 tldram_fast_fraction=0.0625, epoch_cycles=20_000,
                 audit_device=True)
    for seed in (1, 2, 3):
        events = generate_trace("skew,p=0.9,q=0.1,vbs=10,n=6000,vb_kb=512,wfrac=0.3",
                                seed=seed)
        for scenario in ("het_pcm_dram", "het_tldram"):
            lat = {}
            for policy in ("ideal", "aware", "unaware"):
                doc = run_simulation(events, config, scenario, policy=policy)
                lat[policy] = doc["device.avg_access_latency"]
                assert doc["device.audit_violations"] == 0.0, (scenario, policy)
            assert lat["ideal"] <= lat["aware"] <= lat["unaware"], \
                (seed, scenario, lat)
    note("[PASS] heterogeneous ordering: ideal<=aware<=unaware latency, "
         "0 timing violations (both configs, 3 seeds)")


# -- criterion: determinism --

def test_criterion_determinism():
    events = generate_trace("skew,vbs=8,n=3000,wfrac=0.4", seed=123)
    config = cfg(pool_mb=128)
    for scenario, policy in (("native", "aware"), ("virtual2m", "aware"),
                             ("vbi2", "aware"), ("vbifull", "aware"),
                             ("het_pcm_dram", "ideal")):
        one = report_to_json(run_simulation(events, config, scenario,
                                            policy=policy, trace_name="d"))
        two = report_to_json(run_simulation(events, config, scenario,
                                            policy=policy, trace_name="d"))
        assert one == two, scenario
    note("[PASS] determinism: byte-identical stats across repeated runs")
