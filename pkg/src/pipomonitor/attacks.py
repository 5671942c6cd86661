"""Scripted attackers against the cache and against the Auto-Cuckoo filter.

* Prime+Probe on a square-and-multiply victim running on another core.
* Brute-force flushing of a target record with fresh addresses.
* The layered reverse-engineering attack: a white-box adversary builds a
  tree of records whose kick chains can end in the target's bucket.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cachesim import CacheGeometry
from .filter import AutoCuckooFilter, FilterConfig, FilterEntry
from .monitor import MonitorConfig, PiPoMonitor
from .system import Simulator

TARGETS = ("square", "multiply")

# line-aligned victim code addresses, in distinct LLC and L1 sets
DEFAULT_SQUARE_ADDR = 0x1000_0000 + 0x123 * 64
DEFAULT_MULTIPLY_ADDR = 0x1000_0000 + 0x2A7 * 64
DEFAULT_EVSET_BASE = 0x8000_0000


# ---------------------------------------------------------------------------
# Prime+Probe
# ---------------------------------------------------------------------------

def build_eviction_set(target_addr: int, geometry: CacheGeometry, base: int = DEFAULT_EVSET_BASE,
                       count: Optional[int] = None, address_space: int = 1 << 48) -> List[int]:
    """``count`` (default: LLC ways) distinct lines congruent to ``target_addr`` in the LLC.

    Lines are taken at increasing multiples of the LLC set stride starting at
    ``base``, wrapping around the address space and skipping the target.
    """
    line = geometry.line_size
    nsets = geometry.llc.sets(line)
    stride = nsets * line
    count = geometry.llc.ways if count is None else count
    set_off = (target_addr // line) % nsets * line
    congruent = address_space // stride
    if congruent < count + 1:
        raise ValueError(
            f"address space of {address_space:#x} bytes holds only {congruent} lines "
            f"congruent to {target_addr:#x}; need {count} besides the target")
    target_line = target_addr - target_addr % line
    start = base // stride
    out = []
    for k in range(congruent):
        addr = ((start + k) % congruent) * stride + set_off
        if addr == target_line:
            continue
        out.append(addr)
        if len(out) == count:
            break
    return out


@dataclass
class SquareMultiplyVictim:
    """Key-dependent victim: bit 1 runs square then multiply, bit 0 only multiply."""

    secret_bits: Sequence[int]
    square_addr: int = DEFAULT_SQUARE_ADDR
    multiply_addr: int = DEFAULT_MULTIPLY_ADDR
    core: int = 0

    def schedule(self, i: int) -> List[int]:
        if self.secret_bits[i]:
            return [self.square_addr, self.multiply_addr]
        return [self.multiply_addr]


@dataclass
class PrimeProbeAttacker:
    eviction_sets: Dict[str, List[int]]
    core: int = 1
    probe_period: int = 5000
    threshold: int = 145

    def prime(self, sim: Simulator, cycle: int) -> int:
        for name in self.eviction_sets:
            for addr in self.eviction_sets[name]:
                sim.access(self.core, addr, cycle)
                cycle += 1
        return cycle

    def probe(self, sim: Simulator, cycle: int) -> Tuple[Dict[str, bool], int]:
        """Time every eviction-set line; a set with any slow line saw activity."""
        seen = {}
        for name, evset in self.eviction_sets.items():
            slow = False
            for addr in evset:
                if sim.access(self.core, addr, cycle).latency > self.threshold:
                    slow = True
                cycle += 1
            seen[name] = slow
        return seen, cycle


@dataclass
class ProbeTrace:
    observed_miss: Dict[str, List[bool]] = field(default_factory=lambda: {t: [] for t in TARGETS})
    victim_accessed: Dict[str, List[bool]] = field(default_factory=lambda: {t: [] for t in TARGETS})
    # target was brought back by a monitor prefetch since the previous probe
    prefetched: Dict[str, List[bool]] = field(default_factory=lambda: {t: [] for t in TARGETS})
    resident_at_probe: Dict[str, List[bool]] = field(default_factory=lambda: {t: [] for t in TARGETS})
    captured: Dict[str, List[bool]] = field(default_factory=lambda: {t: [] for t in TARGETS})

    def __len__(self) -> int:
        return len(self.observed_miss["square"])


@dataclass
class KeyRecoveryResult:
    inferred_bits: List[int]
    true_bits: List[int]

    @property
    def accuracy(self) -> float:
        if not self.true_bits:
            return 0.0
        same = sum(a == b for a, b in zip(self.inferred_bits, self.true_bits))
        return same / len(self.true_bits)


@dataclass
class AttackScenario:
    key_bits: List[int]
    geometry: CacheGeometry = field(default_factory=CacheGeometry)
    monitor: bool = False
    monitor_config: MonitorConfig = field(default_factory=MonitorConfig)
    probe_period: int = 5000
    victim_core: int = 0
    attacker_core: int = 1
    square_addr: int = DEFAULT_SQUARE_ADDR
    multiply_addr: int = DEFAULT_MULTIPLY_ADDR
    threshold: Optional[int] = None

    @staticmethod
    def random_key(nbits: int, seed: int) -> List[int]:
        rng = random.Random(seed)
        return [rng.getrandbits(1) for _ in range(nbits)]

    def miss_threshold(self) -> int:
        """Midpoint between the LLC hit latency and the full memory latency."""
        if self.threshold is not None:
            return self.threshold
        return (self.geometry.llc.latency + self.geometry.memory_latency) // 2


def run_prime_probe(scenario: AttackScenario,
                    iterations: Optional[int] = None) -> Tuple[ProbeTrace, KeyRecoveryResult]:
    """One key bit per probe period.

    Each iteration primes both sets at the start of the period, lets the victim
    run its bit at mid-period, and probes so that the probe ends with the period.
    """
    if scenario.victim_core == scenario.attacker_core:
        raise ValueError("attacker and victim must run on different cores")
    n = len(scenario.key_bits) if iterations is None else iterations
    g = scenario.geometry
    mon = PiPoMonitor(scenario.monitor_config) if scenario.monitor else None
    sim = Simulator(g, mon)
    victim = SquareMultiplyVictim(scenario.key_bits, scenario.square_addr,
                                  scenario.multiply_addr, scenario.victim_core)
    targets = {"square": victim.square_addr, "multiply": victim.multiply_addr}
    attacker = PrimeProbeAttacker(
        {name: build_eviction_set(addr, g) for name, addr in targets.items()},
        scenario.attacker_core, scenario.probe_period, scenario.miss_threshold())

    period = scenario.probe_period
    probe_len = sum(len(s) for s in attacker.eviction_sets.values())
    trace = ProbeTrace()
    inferred = []
    if 2 * probe_len > period // 2:
        raise ValueError(f"probe period {period} too short for {probe_len}-line sets")
    last_probe = 0
    for i in range(n):
        t0 = i * period
        attacker.prime(sim, t0)
        sched = victim.schedule(i)
        for k, addr in enumerate(sched):
            sim.access(victim.core, addr, t0 + period // 2 + k)
        t_probe = t0 + period - probe_len
        sim.advance(t_probe)
        for name, addr in targets.items():
            trace.victim_accessed[name].append(addr in sched)
            trace.resident_at_probe[name].append(sim.cache.in_llc(addr))
            trace.prefetched[name].append(mon is not None and any(
                ev.event == "prefetch" and ev.addr == addr and last_probe < ev.cycle <= t_probe
                for ev in _recent(mon.events, last_probe)))
            trace.captured[name].append(mon is not None and addr in mon.registry)
        seen, _ = attacker.probe(sim, t_probe)
        for name in targets:
            trace.observed_miss[name].append(seen[name])
        inferred.append(int(seen["square"]))
        last_probe = t_probe
    return trace, KeyRecoveryResult(inferred, list(scenario.key_bits[:n]))


def _recent(events, since: int):
    for ev in reversed(events):
        if ev.cycle <= since:
            break
        yield ev


def prefetched_probes_hit(trace: ProbeTrace) -> bool:
    """Every probe that follows a prefetch of a captured target finds it in the LLC."""
    for name in TARGETS:
        for pf, resident in zip(trace.prefetched[name], trace.resident_at_probe[name]):
            if pf and not resident:
                return False
    return True


# ---------------------------------------------------------------------------
# Filter attacks
# ---------------------------------------------------------------------------

def random_line_addr(rng: random.Random, bits: int = 48) -> int:
    return rng.getrandbits(bits) & ~0x3F


def prefill(flt: AutoCuckooFilter, rng: random.Random, max_fills: Optional[int] = None) -> int:
    """Insert fresh addresses until every entry is valid. Returns the fill count."""
    limit = 4 * flt.config.entries if max_fills is None else max_fills
    n = 0
    while flt.valid_count < flt.config.entries and n < limit:
        flt.query_and_update(random_line_addr(rng))
        n += 1
    return n


def run_brute_force_evict(flt: AutoCuckooFilter, target_addr: int, rng: random.Random,
                          max_fills: Optional[int] = None) -> int:
    """Fill with fresh addresses until the target's record has left the filter.

    Raises ValueError if the target is not present to begin with, and
    RuntimeError if ``max_fills`` is reached first.
    """
    if not flt.contains(target_addr):
        raise ValueError(f"target {target_addr:#x} is not in the filter")
    fp = flt.fingerprint_of(target_addr)
    cands = flt.candidate_buckets(target_addr)
    fills = 0
    while max_fills is None or fills < max_fills:
        fills += 1
        ev = flt.query_and_update(random_line_addr(rng)).evicted
        # a record can only leave through autonomic deletion
        if ev is not None and ev.f_print == fp and ev.bucket in cands \
                and not flt.contains(target_addr):
            return fills
    raise RuntimeError(f"target still present after {max_fills} fills")


@dataclass
class BruteForceSummary:
    fills: List[int]
    expected: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.fills))

    @property
    def std(self) -> float:
        return float(np.std(self.fills, ddof=1)) if len(self.fills) > 1 else 0.0

    @property
    def cv(self) -> float:
        return self.std / self.mean if self.mean else 0.0


def brute_force_trials(config: FilterConfig, trials: int, seed: int = 0) -> BruteForceSummary:
    """Repeat the brute-force eviction on one steady-state (full) filter.

    Each trial inserts a fresh target and counts fills until it is gone.
    """
    rng = random.Random(seed)
    flt = AutoCuckooFilter(config)
    prefill(flt, rng)
    fills = []
    for _ in range(trials):
        target = random_line_addr(rng)
        while flt.contains(target):
            target = random_line_addr(rng)
        flt.query_and_update(target)
        if not flt.contains(target):
            # inserted and immediately displaced out; counts as a zero-cost trial
            fills.append(0)
            continue
        fills.append(run_brute_force_evict(flt, target, rng))
    return BruteForceSummary(fills, config.b * config.l)


def eviction_tree_size(b: int, mnk: int) -> int:
    """Leaf layer of the reverse-engineering tree: b^(mnk+1) trigger records."""
    return b ** (mnk + 1)


@dataclass
class ReverseAttackReport:
    eviction_set_size_used: int
    fills_issued: int
    success: bool
    rounds: int = 0
    pivots_inserted: int = 0


class _AddressPool:
    """Fresh random line addresses, hashed in bulk and indexed by mu and sigma."""

    def __init__(self, flt: AutoCuckooFilter, rng: random.Random, size: int):
        self.flt = flt
        self.rng = rng
        self.size = size
        self._refill()

    def _refill(self):
        nprng = np.random.default_rng(self.rng.getrandbits(64))
        addrs = nprng.integers(0, 1 << 42, size=self.size, dtype=np.uint64) << np.uint64(6)
        _, mu, sigma = self.flt.candidate_buckets_of(addrs)
        self.addrs = addrs
        self.mu_order = np.argsort(mu, kind="stable")
        self.mu_sorted = mu[self.mu_order]
        self.sigma_order = np.argsort(sigma, kind="stable")
        self.sigma_sorted = sigma[self.sigma_order]
        self.mu = mu
        self.used = np.zeros(self.size, dtype=bool)

    def _take(self, order, keys, key, count, exclude_mu=None) -> List[int]:
        lo = np.searchsorted(keys, key, side="left")
        hi = np.searchsorted(keys, key, side="right")
        out = []
        for idx in order[lo:hi]:
            if self.used[idx] or (exclude_mu is not None and self.mu[idx] == exclude_mu):
                continue
            self.used[idx] = True
            out.append(int(self.addrs[idx]))
            if len(out) == count:
                break
        return out

    def with_mu(self, bucket: int, count: int) -> List[int]:
        got = self._take(self.mu_order, self.mu_sorted, bucket, count)
        while len(got) < count:
            self._refill()
            got += self._take(self.mu_order, self.mu_sorted, bucket, count - len(got))
        return got

    def with_sigma(self, bucket: int, count: int) -> List[int]:
        """Addresses whose alternate bucket is ``bucket`` and whose own bucket is not."""
        got = self._take(self.sigma_order, self.sigma_sorted, bucket, count, exclude_mu=bucket)
        while len(got) < count:
            self._refill()
            got += self._take(self.sigma_order, self.sigma_sorted, bucket, count - len(got),
                              exclude_mu=bucket)
        return got


def build_eviction_tree(flt: AutoCuckooFilter, root_bucket: int, pool: _AddressPool
                        ) -> Tuple[List[List[int]], List[int]]:
    """Pivot layers and trigger addresses for a target sitting in ``root_bucket``.

    Layer d holds b^d pivots; each lives in its own bucket and has the bucket
    of its parent (the root for layer 1) as alternate, so a kick that picks it
    moves it one level closer to the target. Triggers are b per deepest node,
    b^(mnk+1) in total, and hash straight into their node's bucket. With
    mnk=0 the triggers go into the root bucket itself.
    """
    b, mnk = flt.config.b, flt.config.mnk
    layers: List[List[int]] = []
    parents = [root_bucket]
    for _ in range(mnk):
        layer = []
        for parent in parents:
            layer += pool.with_sigma(parent, b)
        layers.append(layer)
        parents = [flt.index_of(a) for a in layer]
    triggers = []
    for parent in parents:
        triggers += pool.with_mu(parent, b)
    return layers, triggers


def _record_bucket(flt: AutoCuckooFilter, addr: int) -> Optional[int]:
    fp, mu = flt.fingerprint_of(addr), flt.index_of(addr)
    slot = flt._find(fp, mu)
    return None if slot < 0 else slot // flt.config.b


def run_reverse_attack(config: FilterConfig, target_addr: int, seed: int = 0,
                       budget: Optional[int] = None, pool_size: int = 1 << 20
                       ) -> ReverseAttackReport:
    """White-box eviction-set attack on a steady-state filter.

    The attacker knows the hash functions and where the target record sits,
    but not the filter's random stream. Each round plants a fresh tree rooted
    at the target's bucket and fills its triggers, checking after every fill.
    Rounds repeat until the target is gone or the fill budget (pivots and
    triggers both count) runs out.
    """
    size = eviction_tree_size(config.b, config.mnk)
    budget = 10 * size if budget is None else budget
    rng = random.Random(seed)
    flt = AutoCuckooFilter(config)
    prefill(flt, rng)
    flt.query_and_update(target_addr)
    report = ReverseAttackReport(size, 0, False)
    pool = _AddressPool(flt, rng, min(pool_size, max(1 << 14, 64 * size)))
    while report.fills_issued < budget:
        root = _record_bucket(flt, target_addr)
        if root is None:
            report.success = True
            break
        report.rounds += 1
        layers, triggers = build_eviction_tree(flt, root, pool)
        pivots = [a for layer in layers for a in layer]
        for k, addr in enumerate(pivots + triggers):
            if report.fills_issued >= budget:
                break
            flt.query_and_update(addr)
            report.fills_issued += 1
            report.pivots_inserted += k < len(pivots)
            if not flt.contains(target_addr):
                report.success = True
                break
        if report.success:
            break
    return report


# ---------------------------------------------------------------------------
# Exact analysis on toy filters
# ---------------------------------------------------------------------------

class ScriptedRng:
    """Stand-in for the filter's ``rng`` that replays fixed slot picks."""

    def __init__(self, picks: Sequence[int]):
        self.picks = list(picks)
        self.calls = 0

    def randrange(self, n: int) -> int:
        v = self.picks[self.calls]
        self.calls += 1
        if not 0 <= v < n:
            raise ValueError(f"scripted pick {v} outside range({n})")
        return v


@dataclass
class PlantedChain:
    filter: AutoCuckooFilter
    target_fp: int
    root: int
    chain: List[int]


def plant_chain(config: FilterConfig) -> PlantedChain:
    """Filter state holding the target and one pivot per tree level.

    Buckets 0..mnk form the chain: the target sits in bucket 0, and bucket d
    holds a pivot whose alternate is bucket d-1. Remaining slots of chain
    buckets hold fillers whose alternate is the last bucket, which is left
    empty, so kicking a filler (or the target) ends the chain harmlessly.
    All other buckets are empty.
    """
    l, b, mnk = config.l, config.b, config.mnk
    if mnk + 2 > l:
        raise ValueError(f"need at least mnk+2={mnk + 2} buckets, have {l}")
    probe = AutoCuckooFilter(config)
    sink = l - 1
    by_offset: Dict[int, List[int]] = {}
    for fp in range(1 << config.f):
        by_offset.setdefault(probe.fp_offset(fp), []).append(fp)

    def fresh(offset: int, used: set) -> int:
        for fp in by_offset.get(offset, []):
            if fp not in used:
                used.add(fp)
                return fp
        raise ValueError(f"no spare fingerprint with offset {offset}; raise f")

    entries = [FilterEntry(False, 0, 0)] * config.entries
    chain = list(range(mnk + 1))
    target_fp = None
    for d in chain:
        used: set = set()
        slots = []
        if d == 0:
            target_fp = fresh(d ^ sink, used)
            slots.append(target_fp)
        else:
            slots.append(fresh(d ^ (d - 1), used))
        while len(slots) < b:
            slots.append(fresh(d ^ sink, used))
        for s, fp in enumerate(slots):
            entries[d * b + s] = FilterEntry(True, fp, 0)
    return PlantedChain(AutoCuckooFilter.from_layout(config, entries), target_fp, 0, chain)


def trigger_eviction_probability(state: PlantedChain, fp: int, mu: int) -> Fraction:
    """Exact probability that inserting record (fp, mu) deletes the target.

    Every sequence of slot picks is replayed; each has weight b^-(mnk+1)
    since an insertion draws at most mnk+1 picks.
    """
    flt = state.filter
    b, mnk = flt.config.b, flt.config.mnk
    if flt.contains_record(fp, mu):
        return Fraction(0)
    hits = 0
    for picks in itertools.product(range(b), repeat=mnk + 1):
        trial = flt.copy()
        trial.rng = ScriptedRng(picks)
        ev = trial.query_record(fp, mu).evicted
        if ev is not None and ev.f_print == state.target_fp and ev.bucket == state.root \
                and not trial.contains_record(state.target_fp, state.root):
            hits += 1
    return Fraction(hits, b ** (mnk + 1))


@dataclass
class TreeAnalysis:
    b: int
    mnk: int
    p_max: Fraction
    best_trigger: Tuple[int, int]
    minimal_size: int

    def succeeds(self, size: int) -> bool:
        """A set of ``size`` triggers expects at least one target deletion."""
        return size * self.p_max >= 1


def exhaustive_tree_analysis(config: FilterConfig) -> TreeAnalysis:
    """Search every possible trigger record against the planted chain.

    The best single trigger deletes the target with probability p_max, so the
    smallest trigger set that expects one deletion has ceil(1/p_max) members.
    """
    state = plant_chain(config)
    best, best_p = (0, 0), Fraction(0)
    for mu in range(config.l):
        for fp in range(1 << config.f):
            p = trigger_eviction_probability(state, fp, mu)
            if p > best_p:
                best, best_p = (fp, mu), p
    if best_p == 0:
        raise RuntimeError("no trigger can reach the target")
    minimal = -(-best_p.denominator // best_p.numerator)
    return TreeAnalysis(config.b, config.mnk, best_p, best, minimal)
