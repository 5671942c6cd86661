"""Event loop joining the cache hierarchy and the monitor.

Callers issue demand accesses in non-decreasing cycle order. Before each
access, prefetches that have come due are installed, each possibly evicting a
tagged line and scheduling further prefetches. The monitor never changes the
latency of the access it observes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Union

from .cachesim import AccessResult, CacheGeometry, CacheHierarchy
from .monitor import MonitorAction, MonitorConfig, PiPoMonitor


@dataclass(frozen=True)
class TraceRecord:
    cycle: int
    core: int
    op: str
    addr: int


def parse_trace_line(line: str) -> Optional[TraceRecord]:
    """Parse ``"{cycle} {core} {R|W} {addr_hex}"``; blank and ``#`` lines give None."""
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    parts = text.split()
    if len(parts) != 4:
        raise ValueError(f"malformed trace line: {line!r}")
    cycle, core, op, addr = parts
    op = op.upper()
    if op not in ("R", "W"):
        raise ValueError(f"unknown op {op!r} in trace line: {line!r}")
    return TraceRecord(int(cycle), int(core), op, int(addr, 16))


def read_trace(source: Union[str, Path, Iterable[str]]) -> Iterator[TraceRecord]:
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            yield from read_trace(list(fh))
        return
    last = None
    for n, line in enumerate(source, 1):
        rec = parse_trace_line(line)
        if rec is None:
            continue
        if last is not None and rec.cycle < last:
            raise ValueError(f"line {n}: cycle {rec.cycle} precedes {last}")
        last = rec.cycle
        yield rec


class Simulator:
    def __init__(self, geometry: Optional[CacheGeometry] = None,
                 monitor: Union[PiPoMonitor, MonitorConfig, None] = None):
        self.cache = CacheHierarchy(geometry)
        if isinstance(monitor, MonitorConfig):
            monitor = PiPoMonitor(monitor)
        self.monitor = monitor
        self.cycle = 0
        self.accesses = 0
        self.memory_accesses = 0
        self.prefetches_installed = 0

    @property
    def geometry(self) -> CacheGeometry:
        return self.cache.geometry

    @property
    def events(self):
        return self.monitor.events if self.monitor is not None else []

    def advance(self, cycle: int) -> None:
        """Install every prefetch due by ``cycle`` in due order."""
        if cycle < self.cycle:
            raise ValueError(f"time went backwards: {cycle} < {self.cycle}")
        mon = self.monitor
        if mon is not None:
            while (req := mon.pop_due(cycle)) is not None:
                res = self.cache.install_prefetch(req.addr, req.due_cycle)
                self.prefetches_installed += 1
                mon.on_prefetch(req.addr, req.due_cycle, res.installed, res.llc_victim)
                for line in res.pevicts:
                    mon.on_pevict(line, req.due_cycle)
        self.cycle = cycle

    def access(self, core: int, addr: int, cycle: Optional[int] = None) -> AccessResult:
        cycle = self.cycle if cycle is None else cycle
        self.advance(cycle)
        res = self.cache.access(core, addr, cycle)
        self.accesses += 1
        mon = self.monitor
        line = self.cache.line_of(addr)
        if res.memory_access:
            self.memory_accesses += 1
            if mon is not None and mon.on_access(line, cycle) is MonitorAction.CAPTURE:
                mon.on_capture(line, cycle)
                self.cache.set_pingpong(line)
        elif res.tagged_hit and mon is not None:
            mon.note_demand(line, cycle)
        if mon is not None:
            for victim in res.pevicts:
                mon.on_pevict(victim, cycle)
        return res

    def run_trace(self, records: Iterable[TraceRecord]) -> List[AccessResult]:
        return [self.access(r.core, r.addr, r.cycle) for r in records]
