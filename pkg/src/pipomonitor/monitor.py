"""PiPoMonitor: Ping-Pong detection and delayed obfuscating prefetch.

The monitor sits beside the memory controller. Every LLC miss fetched from
memory (an Access) is recorded in an Auto-Cuckoo filter; when a line's
counter reaches the threshold it is captured and its LLC copy is tagged.
Evicting a tagged line produces a pEvict, answered by a prefetch of the line
back into the LLC after a fixed delay. A line that was prefetched and then
evicted again without any demand access in between is not prefetched a
second time; its tag is dropped instead.
"""

from __future__ import annotations

import csv
import enum
import heapq
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .filter import AutoCuckooFilter, FilterConfig, Status

EVENT_COLUMNS = ("cycle", "event", "addr_hex", "security", "detail")


class MonitorError(RuntimeError):
    """Cache and monitor bookkeeping disagree (e.g. pEvict of an unknown line)."""


class MonitorAction(enum.Enum):
    NONE = "none"
    CAPTURE = "capture"


@dataclass(frozen=True)
class MonitorConfig:
    prefetch_delay: int = 100
    filter_config: FilterConfig = field(default_factory=FilterConfig)

    def __post_init__(self):
        if self.prefetch_delay < 0:
            raise ValueError(f"prefetch_delay must be >= 0, got {self.prefetch_delay}")


@dataclass(frozen=True)
class PrefetchRequest:
    addr: int
    due_cycle: int


@dataclass
class TagState:
    tagged: bool = True
    accessed_since_tag: bool = False
    # False until the first prefetch after (re)tagging has been scheduled
    prefetched: bool = False
    # sequence number of the one prefetch request still allowed to run
    pending: Optional[int] = None


class PingPongRegistry:
    """Lines currently tagged Ping-Pong, with their accessed-since-tag flag."""

    def __init__(self):
        self._lines: Dict[int, TagState] = {}

    def __contains__(self, addr: int) -> bool:
        return addr in self._lines

    def __len__(self) -> int:
        return len(self._lines)

    def get(self, addr: int) -> Optional[TagState]:
        return self._lines.get(addr)

    def tagged(self, addr: int) -> bool:
        st = self._lines.get(addr)
        return st is not None and st.tagged

    def accessed(self, addr: int) -> bool:
        st = self._lines.get(addr)
        return st is not None and st.accessed_since_tag

    def tag(self, addr: int) -> None:
        self._lines[addr] = TagState()

    def mark_accessed(self, addr: int) -> bool:
        st = self._lines.get(addr)
        if st is None:
            return False
        st.accessed_since_tag = True
        return True

    def drop(self, addr: int) -> None:
        self._lines.pop(addr, None)


@dataclass(frozen=True)
class Event:
    cycle: int
    event: str
    addr: int
    security: Optional[int] = None
    detail: str = ""

    def row(self) -> list:
        sec = "" if self.security is None else self.security
        return [self.cycle, self.event, f"{self.addr:#x}", sec, self.detail]


def write_events_csv(events, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(EVENT_COLUMNS)
    for ev in events:
        w.writerow(ev.row())


def events_to_csv(events) -> str:
    buf = io.StringIO()
    write_events_csv(events, buf)
    return buf.getvalue()


@dataclass
class MonitorStats:
    accesses: int = 0
    captures: int = 0
    pevicts: int = 0
    prefetches_scheduled: int = 0
    prefetches_suppressed: int = 0
    prefetches_cancelled: int = 0


class PiPoMonitor:
    def __init__(self, config: Optional[MonitorConfig] = None,
                 filter: Optional[AutoCuckooFilter] = None, log_events: bool = True):
        self.config = config or MonitorConfig()
        self.filter = filter if filter is not None else AutoCuckooFilter(self.config.filter_config)
        self.registry = PingPongRegistry()
        self.stats = MonitorStats()
        self.events: List[Event] = []
        self.log_events = log_events
        self._queue: list = []
        self._seq = 0
        self._last_tick = None

    def record(self, cycle: int, event: str, addr: int, security=None, detail: str = ""):
        if self.log_events:
            self.events.append(Event(cycle, event, addr, security, detail))

    def on_access(self, addr: int, cycle: int) -> MonitorAction:
        """Observe one memory Access. Returns CAPTURE when the line is Ping-Pong."""
        self.stats.accesses += 1
        resp = self.filter.query_and_update(addr)
        self.registry.mark_accessed(addr)
        self.record(cycle, "access", addr, resp.security, resp.status.value)
        if resp.status is Status.PINGPONG:
            return MonitorAction.CAPTURE
        return MonitorAction.NONE

    def on_capture(self, addr: int, cycle: int = 0) -> None:
        self.stats.captures += 1
        self.registry.tag(addr)
        self.record(cycle, "capture", addr, self.config.filter_config.sec_thr)

    def note_demand(self, addr: int, cycle: int = 0) -> None:
        """A demand access hit a tagged line in the LLC."""
        if self.registry.mark_accessed(addr):
            self.record(cycle, "demand", addr)

    def on_pevict(self, addr: int, cycle: int) -> Optional[PrefetchRequest]:
        st = self.registry.get(addr)
        if st is None:
            raise MonitorError(f"pEvict for untracked line {addr:#x} at cycle {cycle}")
        self.stats.pevicts += 1
        if st.prefetched and not st.accessed_since_tag:
            self.registry.drop(addr)
            self.stats.prefetches_suppressed += 1
            self.record(cycle, "pevict", addr, detail="suppressed")
            return None
        st.prefetched = True
        st.accessed_since_tag = False
        st.pending = self._seq
        req = PrefetchRequest(addr, cycle + self.config.prefetch_delay)
        heapq.heappush(self._queue, (req.due_cycle, self._seq, req))
        self._seq += 1
        self.stats.prefetches_scheduled += 1
        self.record(cycle, "pevict", addr, detail=f"prefetch@{req.due_cycle}")
        return req

    def on_prefetch(self, addr: int, cycle: int, installed: bool, victim=None) -> None:
        """A due prefetch reached the LLC.

        A fresh install starts a new accessed-since-prefetch window; a prefetch
        that found the line already resident (refetched by demand) only re-tags.
        """
        st = self.registry.get(addr)
        if installed and st is not None:
            st.accessed_since_tag = False
        detail = "installed" if installed else "resident"
        if victim is not None:
            detail += f" victim={victim:#x}"
        self.record(cycle, "prefetch", addr, detail=detail)

    def pop_due(self, cycle: int) -> Optional[PrefetchRequest]:
        """Next request due by ``cycle``.

        A request is discarded if its line's tag was dropped, or if a re-capture
        or a later pEvict has superseded it.
        """
        while self._queue and self._queue[0][0] <= cycle:
            _, seq, req = heapq.heappop(self._queue)
            st = self.registry.get(req.addr)
            if st is not None and st.pending == seq:
                st.pending = None
                return req
            self.stats.prefetches_cancelled += 1
            self.record(req.due_cycle, "prefetch", req.addr, detail="cancelled")
        return None

    def tick(self, cycle: int) -> List[PrefetchRequest]:
        """Remove and return every request due by ``cycle``, earliest first."""
        if self._last_tick is not None and cycle < self._last_tick:
            raise ValueError(f"tick went backwards: {cycle} < {self._last_tick}")
        self._last_tick = cycle
        due = []
        while (req := self.pop_due(cycle)) is not None:
            due.append(req)
        return due

    @property
    def pending(self) -> List[PrefetchRequest]:
        return [item[2] for item in sorted(self._queue)]
