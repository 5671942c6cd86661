"""Inclusive three-level cache hierarchy.

Private L1 and L2 per core, one shared LLC, strict LRU everywhere. The model
keeps only presence, not data: a level's LRU order changes only when that
level is looked up or filled, so private-cache hits do not refresh the LLC.

Inclusion is enforced downward: an L2 eviction invalidates the core's L1
copy, an LLC eviction back-invalidates every core's L1 and L2. LLC lines carry
the Ping-Pong tag bit; evicting a tagged line is reported as a pEvict.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

LINE_SIZE = 64


class Level(enum.IntEnum):
    L1 = 1
    L2 = 2
    LLC = 3
    MEMORY = 4


@dataclass(frozen=True)
class LevelGeometry:
    size: int
    ways: int
    latency: int

    def sets(self, line_size: int = LINE_SIZE) -> int:
        return self.size // (line_size * self.ways)


@dataclass(frozen=True)
class CacheGeometry:
    """Per-level size/ways/latency, DRAM latency and core count.

    Defaults are the quad-core baseline: 64KB/4-way/2cy L1, 256KB/8-way/18cy
    L2 per core, 4MB/16-way/35cy shared LLC, 200-cycle DRAM.
    """

    l1: LevelGeometry = LevelGeometry(64 * 1024, 4, 2)
    l2: LevelGeometry = LevelGeometry(256 * 1024, 8, 18)
    llc: LevelGeometry = LevelGeometry(4 * 1024 * 1024, 16, 35)
    dram_latency: int = 200
    cores: int = 4
    line_size: int = LINE_SIZE

    def __post_init__(self):
        for name in ("l1", "l2", "llc"):
            lv = getattr(self, name)
            n = lv.size // (self.line_size * lv.ways)
            if n < 1 or n & (n - 1) or n * self.line_size * lv.ways != lv.size:
                raise ValueError(f"{name}: size/(line*ways) must be a power of two, got {lv}")
        if self.cores < 1:
            raise ValueError("need at least one core")

    @classmethod
    def toy(cls, llc_sets=4, llc_ways=2, l1_sets=1, l1_ways=1, l2_sets=1, l2_ways=2,
            cores=2, dram_latency=200) -> "CacheGeometry":
        """Tiny hierarchy for hand-checkable tests; latencies as the default."""
        ls = LINE_SIZE
        return cls(
            l1=LevelGeometry(l1_sets * l1_ways * ls, l1_ways, 2),
            l2=LevelGeometry(l2_sets * l2_ways * ls, l2_ways, 18),
            llc=LevelGeometry(llc_sets * llc_ways * ls, llc_ways, 35),
            dram_latency=dram_latency,
            cores=cores,
        )

    def level(self, level: "Level") -> LevelGeometry:
        return {Level.L1: self.l1, Level.L2: self.l2, Level.LLC: self.llc}[level]

    @property
    def memory_latency(self) -> int:
        """Latency of an access served by DRAM: sum of every traversed level."""
        return self.l1.latency + self.l2.latency + self.llc.latency + self.dram_latency

    @property
    def llc_hit_latency(self) -> int:
        return self.l1.latency + self.l2.latency + self.llc.latency


@dataclass
class CacheLineState:
    """LLC line metadata. Private-cache lines carry no state beyond presence."""

    tag: int
    pingpong_tag: bool = False
    accessed_since_tag: bool = False


@dataclass
class AccessResult:
    hit_level: Level
    latency: int
    back_invalidations: List[Tuple[int, int]] = field(default_factory=list)
    pevicts: List[int] = field(default_factory=list)
    llc_victim: Optional[int] = None
    tagged_hit: bool = False

    @property
    def memory_access(self) -> bool:
        return self.hit_level is Level.MEMORY


@dataclass
class PrefetchResult:
    installed: bool
    llc_victim: Optional[int] = None
    back_invalidations: List[Tuple[int, int]] = field(default_factory=list)
    pevicts: List[int] = field(default_factory=list)


class CacheArray:
    """One set-associative LRU array. Sets are OrderedDicts ordered LRU -> MRU."""

    def __init__(self, geom: LevelGeometry, line_size: int = LINE_SIZE):
        self.geom = geom
        self.line_size = line_size
        self.nsets = geom.sets(line_size)
        self.ways = geom.ways
        self.sets: List[OrderedDict] = [OrderedDict() for _ in range(self.nsets)]

    def set_index(self, addr: int) -> int:
        return (addr // self.line_size) % self.nsets

    def _set(self, line: int) -> OrderedDict:
        return self.sets[(line // self.line_size) % self.nsets]

    def lookup(self, line: int):
        """Return the line's state (touching LRU) or None on a miss."""
        s = self._set(line)
        if line in s:
            s.move_to_end(line)
            return s[line]
        return None

    def peek(self, line: int):
        return self._set(line).get(line)

    def __contains__(self, line: int) -> bool:
        return line in self._set(line)

    def fill(self, line: int, state=True):
        """Insert as MRU; return (victim_line, victim_state) or None."""
        s = self._set(line)
        victim = None
        if len(s) >= self.ways:
            victim = s.popitem(last=False)
        s[line] = state
        return victim

    def invalidate(self, line: int) -> bool:
        return self._set(line).pop(line, None) is not None

    def lines(self):
        for s in self.sets:
            yield from s


class CacheHierarchy:
    def __init__(self, geometry: Optional[CacheGeometry] = None):
        self.geometry = g = geometry or CacheGeometry()
        self.line_size = g.line_size
        self.l1 = [CacheArray(g.l1, g.line_size) for _ in range(g.cores)]
        self.l2 = [CacheArray(g.l2, g.line_size) for _ in range(g.cores)]
        self.llc = CacheArray(g.llc, g.line_size)

    def line_of(self, addr: int) -> int:
        return addr - addr % self.line_size

    def build_set_index(self, addr: int, level: Level = Level.LLC) -> int:
        return (addr // self.line_size) % self.geometry.level(level).sets(self.line_size)

    def access(self, core: int, addr: int, cycle: int = 0) -> AccessResult:
        """Demand access from ``core``; fills every level on the way back."""
        if not 0 <= core < self.geometry.cores:
            raise ValueError(f"core {core} out of range")
        g = self.geometry
        line = self.line_of(addr)
        l1, l2 = self.l1[core], self.l2[core]

        if l1.lookup(line) is not None:
            return AccessResult(Level.L1, g.l1.latency)
        if l2.lookup(line) is not None:
            l1.fill(line)
            return AccessResult(Level.L2, g.l1.latency + g.l2.latency)

        state = self.llc.lookup(line)
        if state is not None:
            tagged = state.pingpong_tag
            if tagged:
                state.accessed_since_tag = True
            self._fill_private(core, line)
            return AccessResult(Level.LLC, g.llc_hit_latency, tagged_hit=tagged)

        result = AccessResult(Level.MEMORY, g.memory_latency)
        self._fill_llc(line, CacheLineState(line), result.back_invalidations,
                       result.pevicts, result)
        self._fill_private(core, line)
        return result

    def _fill_private(self, core: int, line: int):
        victim = self.l2[core].fill(line)
        if victim is not None:
            self.l1[core].invalidate(victim[0])
        self.l1[core].fill(line)

    def _fill_llc(self, line, state, back_invals, pevicts, result=None):
        victim = self.llc.fill(line, state)
        if victim is None:
            return None
        vline, vstate = victim
        for c in range(self.geometry.cores):
            hit1 = self.l1[c].invalidate(vline)
            hit2 = self.l2[c].invalidate(vline)
            if hit1 or hit2:
                back_invals.append((c, vline))
        if vstate.pingpong_tag:
            pevicts.append(vline)
        if result is not None:
            result.llc_victim = vline
        return vline

    def install_prefetch(self, addr: int, cycle: int = 0) -> PrefetchResult:
        """Bring a Ping-Pong line back into the LLC only, tagged and not yet accessed.

        A line that is already resident (a demand fetch beat the prefetch) is
        only re-tagged; its accessed flag is left alone.
        """
        line = self.line_of(addr)
        state = self.llc.lookup(line)
        if state is not None:
            state.pingpong_tag = True
            return PrefetchResult(False)
        res = PrefetchResult(True)
        res.llc_victim = self._fill_llc(line, CacheLineState(line, pingpong_tag=True),
                                        res.back_invalidations, res.pevicts)
        return res

    def set_pingpong(self, addr: int) -> bool:
        """Tag a resident LLC line as Ping-Pong (called on Capture)."""
        state = self.llc.peek(self.line_of(addr))
        if state is None:
            return False
        state.pingpong_tag = True
        state.accessed_since_tag = False
        return True

    def llc_state(self, addr: int) -> Optional[CacheLineState]:
        return self.llc.peek(self.line_of(addr))

    def in_llc(self, addr: int) -> bool:
        return self.line_of(addr) in self.llc

    def check_inclusion(self) -> None:
        """Raise AssertionError if any private line is missing from the LLC."""
        for c in range(self.geometry.cores):
            for line in self.l1[c].lines():
                if line not in self.l2[c]:
                    raise AssertionError(f"core {c}: L1 line {line:#x} not in L2")
            for line in self.l2[c].lines():
                if line not in self.llc:
                    raise AssertionError(f"core {c}: L2 line {line:#x} not in LLC")
