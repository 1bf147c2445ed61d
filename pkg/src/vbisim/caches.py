"""Three-level cache hierarchy with LRU replacement and writeback.

Lines are tagged by whatever address space the scenario uses: block
addresses (which are globally unique, so one space) or per-client
virtual addresses.  Lookups are additive in latency; only dirty lines
evicted from the last level produce writeback events.  Lines are not
required to be inclusive across levels, but a per-VB index lets a
whole VB be invalidated at every level.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

from .addrspace import Vbuid

LINE_BYTES = 64


@dataclass
class CacheLevelConfig:
    size_bytes: int
    ways: int
    latency: int


@dataclass
class Line:
    key: tuple  # (space, line address)
    dirty: bool = False
    zero_filled: bool = False
    vbuid: Vbuid | None = None


@dataclass
class Writeback:
    key: tuple
    zero_filled: bool
    vbuid: Vbuid | None


class CacheLevel:
    def __init__(self, cfg: CacheLevelConfig, name: str):
        self.name = name
        self.latency = cfg.latency
        self.num_sets = cfg.size_bytes // LINE_BYTES // cfg.ways
        self.ways = cfg.ways
        self.sets: list[OrderedDict] = [OrderedDict() for _ in range(self.num_sets)]
        self.by_vb: dict[Vbuid, set] = {}

    def _set(self, key: tuple) -> OrderedDict:
        return self.sets[key[1] % self.num_sets]

    def lookup(self, key: tuple) -> Line | None:
        s = self._set(key)
        line = s.get(key)
        if line is not None:
            s.move_to_end(key)
        return line

    def peek(self, key: tuple) -> Line | None:
        """Lookup without touching replacement state (writeback merges)."""
        return self._set(key).get(key)

    def fill(self, line: Line) -> Line | None:
        """Insert a line; returns the victim if one was evicted."""
        s = self._set(line.key)
        victim = None
        if line.key in s:
            old = s.pop(line.key)
            line.dirty = line.dirty or old.dirty
        elif len(s) >= self.ways:
            _, victim = s.popitem(last=False)
            self._unindex(victim)
        s[line.key] = line
        if line.vbuid is not None:
            self.by_vb.setdefault(line.vbuid, set()).add(line.key)
        return victim

    def remove(self, key: tuple) -> Line | None:
        s = self._set(key)
        line = s.pop(key, None)
        if line is not None:
            self._unindex(line)
        return line

    def _unindex(self, line: Line) -> None:
        if line.vbuid is not None:
            keys = self.by_vb.get(line.vbuid)
            if keys is not None:
                keys.discard(line.key)
                if not keys:
                    del self.by_vb[line.vbuid]

    def lines_of_vb(self, vbuid: Vbuid) -> list[tuple]:
        return sorted(self.by_vb.get(vbuid, ()))

    def all_lines(self):
        for s in self.sets:
            yield from s.values()


@dataclass
class AccessResult:
    hit_level: int | None  # 0-based level index, None on full miss
    latency: int
    writebacks: list[Writeback] = field(default_factory=list)


class CacheHierarchy:
    def __init__(self, configs: list[CacheLevelConfig], stats):
        names = ["l1", "l2", "l3"][: len(configs)]
        self.levels = [CacheLevel(c, n) for c, n in zip(configs, names)]
        self.stats = stats

    @property
    def llc(self) -> CacheLevel:
        return self.levels[-1]

    def line_key(self, space, addr: int) -> tuple:
        return (space, addr // LINE_BYTES)

    def access(self, space, addr: int, kind: str,
               vbuid: Vbuid | None = None) -> AccessResult:
        """Look up all levels in order.  On a hit the line is promoted to
        the upper levels; on a full miss the caller resolves the line and
        calls fill()."""
        key = self.line_key(space, addr)
        latency = 0
        for i, level in enumerate(self.levels):
            latency += level.latency
            line = level.lookup(key)
            if line is None:
                self.stats.bump(f"cache.{level.name}.miss")
                continue
            self.stats.bump(f"cache.{level.name}.hit")
            if kind == "w":
                line.dirty = True
                line.zero_filled = False
            wbs: list[Writeback] = []
            if i > 0:
                level.remove(key)
                self._install(0, i, Line(key, line.dirty, line.zero_filled, line.vbuid), wbs)
            return AccessResult(i, latency, wbs)
        return AccessResult(None, latency)

    def fill(self, space, addr: int, kind: str, zero_filled: bool,
             vbuid: Vbuid | None = None) -> list[Writeback]:
        """Install a freshly resolved line in every level (outermost first
        so the LLC copy is oldest).  Returns dirty LLC writebacks."""
        key = self.line_key(space, addr)
        line = Line(key, dirty=(kind == "w"), zero_filled=zero_filled and kind != "w",
                    vbuid=vbuid)
        wbs: list[Writeback] = []
        self._install(0, len(self.levels) - 1, line, wbs)
        return wbs

    def _install(self, top: int, bottom: int, line: Line, wbs: list[Writeback]) -> None:
        for i in range(bottom, top - 1, -1):
            victim = self.levels[i].fill(
                Line(line.key, line.dirty, line.zero_filled, line.vbuid))
            if victim is not None:
                self._handle_victim(i, victim, wbs)

    def _handle_victim(self, level_idx: int, victim: Line, wbs: list[Writeback]) -> None:
        if not victim.dirty:
            self.stats.bump("evict.clean")
            return
        if level_idx == len(self.levels) - 1:
            self.stats.bump("writebacks.dirty")
            wbs.append(Writeback(victim.key, victim.zero_filled, victim.vbuid))
            return
        # dirty victim moves down one level
        down = self.levels[level_idx + 1]
        lower = down.peek(victim.key)
        if lower is not None:
            lower.dirty = True
            lower.zero_filled = False
            return
        next_victim = down.fill(victim)
        if next_victim is not None:
            self._handle_victim(level_idx + 1, next_victim, wbs)

    def invalidate_vb(self, vbuid: Vbuid) -> int:
        """Drop every line of a VB at every level, dirty ones included;
        the VB is dead so nothing is written back.  Returns the count of
        distinct lines removed."""
        dropped: set[tuple] = set()
        for level in self.levels:
            for key in level.lines_of_vb(vbuid):
                if level.remove(key) is not None:
                    dropped.add(key)
        self.stats.bump("invalidations", len(dropped))
        return len(dropped)

    def flush_vb_dirty(self, vbuid: Vbuid) -> list[Writeback]:
        """Write back (and clean) every dirty line of a VB, innermost copy
        wins.  Used by VB promotion."""
        seen: set[tuple] = set()
        wbs: list[Writeback] = []
        for level in self.levels:
            for key in level.lines_of_vb(vbuid):
                line = level.peek(key)
                if line is None or not line.dirty or key in seen:
                    if line is not None and line.dirty:
                        line.dirty = False
                    continue
                seen.add(key)
                wbs.append(Writeback(key, line.zero_filled, line.vbuid))
                line.dirty = False
        self.stats.bump("flush.dirty_lines", len(wbs))
        return wbs

    def drain(self) -> list[Writeback]:
        """End-of-run writeback of every dirty line, deduplicated with the
        innermost copy winning; ordering is deterministic."""
        seen: set[tuple] = set()
        wbs: list[Writeback] = []
        for level in self.levels:
            lines = sorted((l for l in level.all_lines() if l.dirty),
                           key=lambda l: (str(l.key[0]), l.key[1]))
            for line in lines:
                line.dirty = False
                if line.key in seen:
                    continue
                seen.add(line.key)
                wbs.append(Writeback(line.key, line.zero_filled, line.vbuid))
        return wbs
