"""Auto-Cuckoo filter.

A cuckoo filter of ``l`` buckets by ``b`` entries that stores ``f``-bit
fingerprints of cache-line addresses next to a small saturating reAccess
counter (``security``). Lookups check the two candidate buckets derived by
partial-key cuckoo hashing. Insertion never fails: once ``mnk`` kicks have
been spent, the record displaced last is dropped (autonomic deletion).

There is deliberately no delete API. Removing a record by fingerprint would
let an adversary delete a victim's record through a colliding address.

Entries are kept in two flat row-major lists (fingerprint, counter), with
``-1`` marking an invalid slot; fingerprint 0 is a legal value.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import Iterable, List, Optional

import numpy as np

from .hashing import (
    ROLE_FINGERPRINT,
    ROLE_INDEX,
    ROLE_OFFSET,
    line_of,
    mix64,
    mix64_array,
    role_salt,
)

COUNTER_BITS = 2
COUNTER_MAX = (1 << COUNTER_BITS) - 1
EMPTY = -1


class Status(enum.Enum):
    INSERTED = "inserted"
    REACCESS = "reaccess"
    PINGPONG = "pingpong"


@dataclass(frozen=True)
class FilterConfig:
    """Geometry and policy of an Auto-Cuckoo filter.

    ``l`` buckets (power of two) of ``b`` entries, ``f``-bit fingerprints,
    at most ``mnk`` kicks per insertion and a capture threshold ``sec_thr``.
    ``rng_seed`` drives victim selection during kicks; ``hash_seed`` keys the
    hash functions.
    """

    l: int = 1024
    b: int = 8
    f: int = 12
    mnk: int = 4
    sec_thr: int = 3
    rng_seed: int = 0
    hash_seed: int = 0

    def __post_init__(self):
        if self.l < 1 or self.l & (self.l - 1):
            raise ValueError(f"l must be a power of two, got {self.l}")
        if self.b < 1:
            raise ValueError(f"b must be positive, got {self.b}")
        if not 1 <= self.f <= 16:
            raise ValueError(f"f must be in 1..16, got {self.f}")
        if self.mnk < 0:
            raise ValueError(f"mnk must be non-negative, got {self.mnk}")
        if not 1 <= self.sec_thr <= COUNTER_MAX:
            raise ValueError(f"sec_thr must be in 1..{COUNTER_MAX}, got {self.sec_thr}")

    @property
    def entries(self) -> int:
        return self.l * self.b

    @property
    def record_bits(self) -> int:
        return 1 + self.f + COUNTER_BITS


@dataclass(frozen=True)
class FilterEntry:
    valid: bool
    f_print: int
    security: int


@dataclass(frozen=True)
class EvictedRecord:
    """A record dropped by autonomic deletion, with the bucket it last sat in."""

    bucket: int
    f_print: int
    security: int


@dataclass(frozen=True)
class InsertOutcome:
    bucket: int
    slot: int
    relocations: int
    evicted: Optional[EvictedRecord] = None


@dataclass(frozen=True)
class FilterResponse:
    status: Status
    security: int
    evicted: Optional[EvictedRecord] = None


@dataclass
class FilterStats:
    insertions: int = 0
    relocations: int = 0
    deletions: int = 0
    merges: int = 0
    self_pairs: int = 0


def theoretical_fpr(config: FilterConfig) -> float:
    """Upper bound on the false-positive rate of one lookup: 1 - (1 - 2^-f)^(2b)."""
    return 1.0 - (1.0 - 2.0 ** -config.f) ** (2 * config.b)


class AutoCuckooFilter:
    def __init__(self, config: Optional[FilterConfig] = None, track_sources: bool = False):
        self.config = config or FilterConfig()
        cfg = self.config
        self._l, self._b, self._mnk, self._thr = cfg.l, cfg.b, cfg.mnk, cfg.sec_thr
        self._mask = cfg.l - 1
        self._fp_shift = 64 - cfg.f
        self._salt_index = role_salt(cfg.hash_seed, ROLE_INDEX)
        self._salt_fp = role_salt(cfg.hash_seed, ROLE_FINGERPRINT)
        self._salt_offset = role_salt(cfg.hash_seed, ROLE_OFFSET)
        # fingerprint -> xor offset; at most 2^16 entries
        self._offset = [mix64(v, self._salt_offset) & self._mask for v in range(1 << cfg.f)]

        self._fp: List[int] = [EMPTY] * cfg.entries
        self._sec: List[int] = [0] * cfg.entries
        self._valid = 0
        self._sources: Optional[list] = [None] * cfg.entries if track_sources else None
        self.rng = random.Random(cfg.rng_seed)
        self.stats = FilterStats()

    # hashing

    def fingerprint_of(self, addr: int) -> int:
        return mix64(line_of(addr), self._salt_fp) >> self._fp_shift

    def index_of(self, addr: int) -> int:
        return mix64(line_of(addr), self._salt_index) & self._mask

    def fp_offset(self, fp: int) -> int:
        return self._offset[fp]

    def alternate_bucket(self, i: int, fp: int) -> int:
        return i ^ self._offset[fp]

    def candidate_buckets(self, addr: int) -> tuple[int, int]:
        mu = self.index_of(addr)
        return mu, mu ^ self._offset[self.fingerprint_of(addr)]

    def fingerprints_of(self, addrs) -> np.ndarray:
        lines = np.asarray(addrs, dtype=np.uint64) >> np.uint64(6)
        return mix64_array(lines, self._salt_fp) >> np.uint64(self._fp_shift)

    def candidate_buckets_of(self, addrs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised (fingerprint, mu, sigma) for an array of addresses."""
        lines = np.asarray(addrs, dtype=np.uint64) >> np.uint64(6)
        fps = (mix64_array(lines, self._salt_fp) >> np.uint64(self._fp_shift)).astype(np.int64)
        mu = (mix64_array(lines, self._salt_index) & np.uint64(self._mask)).astype(np.int64)
        sigma = mu ^ np.asarray(self._offset, dtype=np.int64)[fps]
        return fps, mu, sigma

    # lookup / update

    def _locate(self, fp: int, bucket: int) -> int:
        base = bucket * self._b
        seg = self._fp[base:base + self._b]
        if fp in seg:
            return base + seg.index(fp)
        return -1

    def _find(self, fp: int, mu: int) -> int:
        slot = self._locate(fp, mu)
        if slot < 0:
            sigma = mu ^ self._offset[fp]
            if sigma != mu:
                slot = self._locate(fp, sigma)
        return slot

    def contains(self, addr: int) -> bool:
        fp = self.fingerprint_of(addr)
        return self._find(fp, self.index_of(addr)) >= 0

    def contains_record(self, fp: int, mu: int) -> bool:
        return self._find(fp, mu) >= 0

    def contains_many(self, addrs, chunk: int = 1 << 18) -> np.ndarray:
        """Read-only bulk lookup; equivalent to ``[contains(a) for a in addrs]``."""
        table = np.asarray(self._fp, dtype=np.int64).reshape(self._l, self._b)
        addrs = np.asarray(addrs, dtype=np.uint64)
        out = np.empty(len(addrs), dtype=bool)
        for start in range(0, len(addrs), chunk):
            fps, mu, sigma = self.candidate_buckets_of(addrs[start:start + chunk])
            col = fps[:, None]
            hit = (table[mu] == col).any(axis=1) | (table[sigma] == col).any(axis=1)
            out[start:start + chunk] = hit
        return out

    def query_and_update(self, addr: int) -> FilterResponse:
        """Record one memory Access of ``addr`` and report its reAccess count."""
        return self.query_record(self.fingerprint_of(addr), self.index_of(addr), source=addr)

    def query_record(self, fp: int, mu: int, source=None) -> FilterResponse:
        """Record-level form of :meth:`query_and_update` for white-box analysis."""
        slot = self._find(fp, mu)
        if slot >= 0:
            sec = self._sec[slot]
            if sec < self._thr:
                sec += 1
                self._sec[slot] = sec
            self.stats.merges += 1
            if self._sources is not None and source is not None:
                self._sources[slot].add(source)
            status = Status.PINGPONG if sec == self._thr else Status.REACCESS
            return FilterResponse(status, sec)
        outcome = self.insert_with_relocation(fp, mu, source=source)
        return FilterResponse(Status.INSERTED, 0, outcome.evicted)

    def insert_with_relocation(self, fp: int, start_bucket: int, source=None) -> InsertOutcome:
        """Install ``fp`` (assumed absent) with candidate buckets start / alternate.

        Vacancies are taken in the order start bucket, alternate bucket, lowest
        slot first. Otherwise kicks begin in the start bucket: a uniformly
        chosen resident is swapped out and moved to its own alternate bucket,
        and so on. After ``mnk`` relocations the record displaced last is
        dropped and reported.
        """
        b, fps, secs, srcs = self._b, self._fp, self._sec, self._sources
        stats = self.stats
        stats.insertions += 1
        alt = start_bucket ^ self._offset[fp]
        if alt == start_bucket:
            stats.self_pairs += 1
        src = {source} if srcs is not None and source is not None else None

        for bucket in (start_bucket, alt):
            base = bucket * b
            seg = fps[base:base + b]
            if EMPTY in seg:
                slot = base + seg.index(EMPTY)
                fps[slot], secs[slot] = fp, 0
                if srcs is not None:
                    srcs[slot] = src
                self._valid += 1
                return InsertOutcome(bucket, slot - base, 0)

        cur_fp, cur_sec, cur_src = fp, 0, src
        bucket = start_bucket
        placed = None
        relocations = 0
        for kick in range(self._mnk + 1):
            slot = bucket * b + self.rng.randrange(b)
            cur_fp, fps[slot] = fps[slot], cur_fp
            cur_sec, secs[slot] = secs[slot], cur_sec
            if srcs is not None:
                cur_src, srcs[slot] = srcs[slot], cur_src
            if placed is None:
                placed = (bucket, slot - bucket * b)
            if kick == self._mnk:
                break
            bucket ^= self._offset[cur_fp]
            relocations += 1
            base = bucket * b
            seg = fps[base:base + b]
            if EMPTY in seg:
                slot = base + seg.index(EMPTY)
                fps[slot], secs[slot] = cur_fp, cur_sec
                if srcs is not None:
                    srcs[slot] = cur_src
                self._valid += 1
                stats.relocations += relocations
                return InsertOutcome(placed[0], placed[1], relocations)

        stats.relocations += relocations
        stats.deletions += 1
        return InsertOutcome(placed[0], placed[1], relocations,
                             EvictedRecord(bucket, cur_fp, cur_sec))

    # state inspection

    @property
    def valid_count(self) -> int:
        return self._valid

    def occupancy(self) -> float:
        return self._valid / self.config.entries

    def entry(self, bucket: int, slot: int) -> FilterEntry:
        i = bucket * self._b + slot
        fp = self._fp[i]
        if fp == EMPTY:
            return FilterEntry(False, 0, 0)
        return FilterEntry(True, fp, self._sec[i])

    def bucket(self, i: int) -> List[FilterEntry]:
        return [self.entry(i, s) for s in range(self._b)]

    def layout(self) -> List[FilterEntry]:
        return [self.entry(i, s) for i in range(self._l) for s in range(self._b)]

    def sources(self, bucket: int, slot: int) -> frozenset:
        if self._sources is None:
            raise RuntimeError("filter was built without track_sources=True")
        return frozenset(self._sources[bucket * self._b + slot] or ())

    def iter_sources(self) -> Iterable[frozenset]:
        """Source-address sets of all valid entries (requires source tracking)."""
        if self._sources is None:
            raise RuntimeError("filter was built without track_sources=True")
        for fp, src in zip(self._fp, self._sources):
            if fp != EMPTY:
                yield frozenset(src or ())

    def copy(self) -> "AutoCuckooFilter":
        clone = AutoCuckooFilter.__new__(AutoCuckooFilter)
        clone.__dict__.update(self.__dict__)
        clone._fp = list(self._fp)
        clone._sec = list(self._sec)
        if self._sources is not None:
            clone._sources = [set(s) if s is not None else None for s in self._sources]
        clone.rng = random.Random()
        clone.rng.setstate(self.rng.getstate())
        clone.stats = FilterStats(**vars(self.stats))
        return clone

    # serialisation: l*b records of {valid:1, fPrint:f, security:2}, row-major,
    # first record in the most significant bits, zero-padded to whole bytes

    def to_bytes(self) -> bytes:
        f = self.config.f
        acc = 0
        for fp, sec in zip(self._fp, self._sec):
            rec = 0 if fp == EMPTY else (1 << (f + COUNTER_BITS)) | (fp << COUNTER_BITS) | sec
            acc = (acc << self.config.record_bits) | rec
        nbits = self.config.entries * self.config.record_bits
        pad = -nbits % 8
        return (acc << pad).to_bytes((nbits + pad) // 8, "big")

    @classmethod
    def from_layout(cls, config: FilterConfig, entries: Iterable[FilterEntry],
                    track_sources: bool = False) -> "AutoCuckooFilter":
        flt = cls(config, track_sources=track_sources)
        entries = list(entries)
        if len(entries) != config.entries:
            raise ValueError(f"expected {config.entries} entries, got {len(entries)}")
        for i, e in enumerate(entries):
            if not e.valid:
                continue
            if not 0 <= e.f_print < (1 << config.f):
                raise ValueError(f"fingerprint {e.f_print} out of range at {i}")
            if not 0 <= e.security <= config.sec_thr:
                raise ValueError(f"security {e.security} out of range at {i}")
            flt._fp[i], flt._sec[i] = e.f_print, e.security
            flt._valid += 1
            if track_sources:
                flt._sources[i] = set()
        return flt

    @classmethod
    def from_bytes(cls, config: FilterConfig, data: bytes) -> "AutoCuckooFilter":
        w = config.record_bits
        nbits = config.entries * w
        if len(data) != (nbits + 7) // 8:
            raise ValueError("byte length does not match the configured geometry")
        acc = int.from_bytes(data, "big") >> (-nbits % 8)
        entries = []
        for k in range(config.entries - 1, -1, -1):
            rec = (acc >> (k * w)) & ((1 << w) - 1)
            valid = bool(rec >> (config.f + COUNTER_BITS))
            fp = (rec >> COUNTER_BITS) & ((1 << config.f) - 1)
            entries.append(FilterEntry(valid, fp, rec & COUNTER_MAX) if valid
                           else FilterEntry(False, 0, 0))
        return cls.from_layout(config, entries)
