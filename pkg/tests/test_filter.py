import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pipomonitor.filter import (
    AutoCuckooFilter,
    FilterConfig,
    FilterEntry,
    Status,
    theoretical_fpr,
)
from pipomonitor.hashing import mix64, mix64_array

from reference_filter import ReferenceFilter

# frozen from ReferenceFilter(16, 2, 8, 2, rng_seed=7) over GOLDEN_SEQUENCE
GOLDEN_SEQUENCE = [0x1000 + 64 * (37 * i % 101) for i in range(60)] + [0x1000 + 64 * 5] * 2
GOLDEN_LAYOUT = [
    (1, 22, 0), (1, 11, 0), (1, 48, 0), (1, 216, 0), (1, 45, 0), (1, 43, 0),
    (1, 58, 0), (1, 133, 0), (1, 27, 0), (1, 144, 0), (1, 146, 0), (1, 253, 0),
    (1, 156, 0), (1, 190, 0), (1, 158, 0), (1, 58, 0), (1, 147, 0), (1, 148, 0),
    (1, 119, 0), (1, 135, 0), (1, 212, 0), (1, 242, 0), (1, 116, 0), (1, 252, 0),
    (1, 148, 0), (1, 1, 0), (1, 205, 0), (1, 189, 0), (1, 249, 0), (1, 23, 0),
    (1, 159, 2), (1, 84, 0),
]


def layout_tuples(flt):
    return [(1, e.f_print, e.security) if e.valid else (0, 0, 0) for e in flt.layout()]


def rand_addrs(n, seed):
    rng = random.Random(seed)
    return [rng.getrandbits(48) & ~63 for _ in range(n)]


# --- config -----------------------------------------------------------------

def test_default_config_values():
    c = FilterConfig()
    assert (c.l, c.b, c.f, c.sec_thr, c.mnk) == (1024, 8, 12, 3, 4)


@pytest.mark.parametrize("kw", [dict(l=1000), dict(l=0), dict(f=0), dict(f=17),
                                dict(sec_thr=4), dict(sec_thr=0), dict(mnk=-1), dict(b=0)])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        FilterConfig(**kw)


def test_theoretical_fpr_values():
    assert theoretical_fpr(FilterConfig(f=1, b=1, l=1)) == pytest.approx(0.75)
    eps = theoretical_fpr(FilterConfig())
    assert eps == pytest.approx(1 - (1 - 2**-12) ** 16)
    assert 0.0038 < eps < 0.0040
    assert theoretical_fpr(FilterConfig(f=16)) < 3e-4


# --- hashing ----------------------------------------------------------------

def test_numpy_mixer_matches_scalar():
    xs = rand_addrs(500, 1)
    vec = mix64_array(np.array(xs, dtype=np.uint64), 12345)
    assert [int(v) for v in vec] == [mix64(x, 12345) for x in xs]


def test_fingerprint_deterministic_and_bounded():
    flt = AutoCuckooFilter()
    for a in rand_addrs(2000, 2):
        fp = flt.fingerprint_of(a)
        assert fp == flt.fingerprint_of(a)
        assert 0 <= fp < 4096


def test_fingerprint_ignores_line_offset():
    flt = AutoCuckooFilter()
    assert flt.fingerprint_of(0x12340) == flt.fingerprint_of(0x1237F)
    assert flt.candidate_buckets(0x12340) == flt.candidate_buckets(0x1237F)


def test_fingerprint_uniformity():
    flt = AutoCuckooFilter()
    rng = np.random.default_rng(3)
    addrs = rng.integers(0, 1 << 42, size=10**6, dtype=np.uint64) << np.uint64(6)
    counts = np.bincount(flt.fingerprints_of(addrs).astype(np.int64), minlength=4096)
    mean = 10**6 / 4096
    sigma = np.sqrt(mean * (1 - 1 / 4096))
    assert len(counts) == 4096
    assert np.all(np.abs(counts - mean) <= 5 * sigma)


def test_vectorised_buckets_match_scalar():
    flt = AutoCuckooFilter()
    addrs = rand_addrs(1000, 4)
    fps, mu, sigma = flt.candidate_buckets_of(addrs)
    for a, f, m, s in zip(addrs, fps, mu, sigma):
        assert (int(f), int(m), int(s)) == (flt.fingerprint_of(a), *flt.candidate_buckets(a))


def test_candidate_buckets_definition_and_range():
    flt = AutoCuckooFilter()
    for a in rand_addrs(10**5, 5)[:20000]:
        mu, sigma = flt.candidate_buckets(a)
        fp = flt.fingerprint_of(a)
        assert mu ^ flt.fp_offset(fp) == sigma
        assert flt.alternate_bucket(sigma, fp) == mu
        assert 0 <= mu < 1024 and 0 <= sigma < 1024
    _, mu, sigma = flt.candidate_buckets_of(rand_addrs(10**5, 5))
    assert mu.max() < 1024 and sigma.max() < 1024


def test_alternate_bucket_involution_exhaustive_small():
    flt = AutoCuckooFilter(FilterConfig(l=64, f=10))
    for fp in range(1 << 10):
        for i in range(64):
            assert flt.alternate_bucket(flt.alternate_bucket(i, fp), fp) == i


def test_alternate_bucket_is_bijection():
    flt = AutoCuckooFilter(FilterConfig(l=16, f=8))
    for fp in range(256):
        assert sorted(flt.alternate_bucket(i, fp) for i in range(16)) == list(range(16))


def test_zero_offset_gives_self_pair():
    flt = AutoCuckooFilter(FilterConfig(l=16, f=8))
    zero = [fp for fp in range(256) if flt.fp_offset(fp) == 0]
    assert zero, "expected some fingerprints with zero offset at l=16"
    for fp in zero:
        assert all(flt.alternate_bucket(i, fp) == i for i in range(16))


def test_hash_seed_changes_hashes():
    a = AutoCuckooFilter(FilterConfig(hash_seed=0))
    b = AutoCuckooFilter(FilterConfig(hash_seed=1))
    addrs = rand_addrs(200, 6)
    assert [a.fingerprint_of(x) for x in addrs] != [b.fingerprint_of(x) for x in addrs]


# --- query_and_update ----------------------------------------------------------

def test_empty_filter():
    flt = AutoCuckooFilter()
    assert flt.occupancy() == 0.0
    assert not any(flt.contains(a) for a in rand_addrs(100, 7))


def test_first_touch_inserts():
    flt = AutoCuckooFilter()
    r = flt.query_and_update(0x4000)
    assert (r.status, r.security, r.evicted) == (Status.INSERTED, 0, None)
    assert flt.contains(0x4000)


def test_four_queries_status_sequence():
    flt = AutoCuckooFilter()
    got = [flt.query_and_update(0xABC0) for _ in range(5)]
    assert [(r.status, r.security) for r in got] == [
        (Status.INSERTED, 0), (Status.REACCESS, 1), (Status.REACCESS, 2),
        (Status.PINGPONG, 3), (Status.PINGPONG, 3)]


@pytest.mark.parametrize("thr", [1, 2, 3])
def test_pingpong_iff_security_reaches_threshold(thr):
    flt = AutoCuckooFilter(FilterConfig(sec_thr=thr))
    for k in range(6):
        r = flt.query_and_update(0x7700)
        assert r.security == min(k, thr)
        assert (r.status is Status.PINGPONG) == (r.security == thr)


def find_colliding_pair(flt, seed=8):
    """Two addresses with the same fingerprint and the same bucket pair."""
    rng = np.random.default_rng(seed)
    addrs = rng.integers(0, 1 << 42, size=1 << 21, dtype=np.uint64) << np.uint64(6)
    fps, mu, sigma = flt.candidate_buckets_of(addrs)
    key = fps * (1 << 20) + np.minimum(mu, sigma) * 1024 + np.maximum(mu, sigma)
    order = np.argsort(key, kind="stable")
    ks = key[order]
    dup = np.nonzero(ks[1:] == ks[:-1])[0]
    assert len(dup), "no colliding pair in the sample"
    i, j = order[dup[0]], order[dup[0] + 1]
    return int(addrs[i]), int(addrs[j])


def test_engineered_collision_is_false_positive():
    flt = AutoCuckooFilter()
    a, b = find_colliding_pair(flt)
    assert a != b
    assert flt.fingerprint_of(a) == flt.fingerprint_of(b)
    for _ in range(3):
        flt.query_and_update(a)
    r = flt.query_and_update(b)
    assert r.status is Status.PINGPONG
    assert flt.valid_count == 1


def test_security_preserved_across_relocation():
    cfg = FilterConfig(l=8, b=1, f=8, mnk=3)
    probe = AutoCuckooFilter(cfg)
    fps = [fp for fp in range(256) if probe.fp_offset(fp) == 1]
    x = [fp for fp in range(256) if probe.fp_offset(fp) == 2][0]
    entries = [FilterEntry(False, 0, 0)] * 8
    entries[0] = FilterEntry(True, fps[0], 2)   # alternate is bucket 1, vacant
    entries[2] = FilterEntry(True, fps[1], 0)   # fills x's alternate bucket
    flt = AutoCuckooFilter.from_layout(cfg, entries)
    out = flt.insert_with_relocation(x, 0)
    assert out.relocations == 1 and out.evicted is None
    assert flt.entry(1, 0) == FilterEntry(True, fps[0], 2)
    assert flt.entry(0, 0) == FilterEntry(True, x, 0)


# --- insertion ------------------------------------------------------------

def test_vacancy_order_mu_then_sigma_lowest_slot():
    cfg = FilterConfig(l=16, b=2, f=8, mnk=2)
    flt = AutoCuckooFilter(cfg)
    fp = next(v for v in range(256) if flt.fp_offset(v) != 0)
    mu = 3
    sigma = mu ^ flt.fp_offset(fp)
    others = [v for v in range(256) if v != fp][:4]
    assert flt.insert_with_relocation(others[0], mu).slot == 0
    out = flt.insert_with_relocation(fp, mu)
    assert (out.bucket, out.slot) == (mu, 1)
    flt2 = AutoCuckooFilter(cfg)
    flt2.insert_with_relocation(others[0], mu)
    flt2.insert_with_relocation(others[1], mu)
    out = flt2.insert_with_relocation(fp, mu)
    assert (out.bucket, out.slot, out.relocations) == (sigma, 0, 0)


def test_mnk_zero_drops_victim_immediately():
    cfg = FilterConfig(l=4, b=2, f=8, mnk=0)
    flt = AutoCuckooFilter(cfg)
    fp = next(v for v in range(256) if flt.fp_offset(v) == 1)
    residents = [v for v in range(256) if v != fp][:4]
    entries = [FilterEntry(True, residents[k], k % 3) for k in range(4)] + \
              [FilterEntry(False, 0, 0)] * 4
    flt = AutoCuckooFilter.from_layout(cfg, entries)
    before = flt.bucket(0)
    out = flt.insert_with_relocation(fp, 0)
    assert out.relocations == 0
    assert out.evicted is not None and out.evicted.bucket == 0
    assert (out.bucket, flt.entry(0, out.slot).f_print) == (0, fp)
    assert FilterEntry(True, out.evicted.f_print, out.evicted.security) == before[out.slot]
    assert flt.valid_count == 4


def test_relocation_chain_ends_in_vacancy():
    # l=8, b=1: x lands on a, a moves onto c, c moves into an empty bucket
    cfg = FilterConfig(l=8, b=1, f=8, mnk=4)
    probe = AutoCuckooFilter(cfg)
    by_off = {}
    for v in range(256):
        by_off.setdefault(probe.fp_offset(v), []).append(v)
    x = by_off[4][0]        # candidate buckets 0 and 4
    a = by_off[1][0]        # bucket 0 <-> 1
    c = by_off[3][0]        # bucket 1 <-> 2
    blocker = by_off[6][0]  # bucket 4 <-> 2, keeps sigma_x full
    entries = [FilterEntry(False, 0, 0)] * 8
    entries[0] = FilterEntry(True, a, 1)
    entries[1] = FilterEntry(True, c, 2)
    entries[4] = FilterEntry(True, blocker, 0)
    flt = AutoCuckooFilter.from_layout(cfg, entries)
    out = flt.insert_with_relocation(x, 0)
    assert out.relocations == 2 and out.evicted is None
    assert [flt.entry(i, 0) for i in (0, 1, 2)] == [
        FilterEntry(True, x, 0), FilterEntry(True, a, 1), FilterEntry(True, c, 2)]
    assert flt.valid_count == 4


def test_golden_layout_matches_frozen_and_reference():
    cfg = FilterConfig(l=16, b=2, f=8, mnk=2, rng_seed=7)
    flt = AutoCuckooFilter(cfg)
    ref = ReferenceFilter(16, 2, 8, 2, rng_seed=7)
    for a in GOLDEN_SEQUENCE:
        flt.query_and_update(a)
        ref.access(a)
    assert layout_tuples(flt) == GOLDEN_LAYOUT
    assert ref.layout() == GOLDEN_LAYOUT


@pytest.mark.parametrize("seed", range(5))
def test_matches_reference_on_random_streams(seed):
    cfg = FilterConfig(l=32, b=4, f=10, mnk=3, rng_seed=seed, hash_seed=seed)
    flt = AutoCuckooFilter(cfg)
    ref = ReferenceFilter(32, 4, 10, 3, rng_seed=seed, hash_seed=seed)
    rng = random.Random(seed)
    pool = rand_addrs(300, seed)
    for _ in range(2000):
        a = rng.choice(pool)
        assert flt.query_and_update(a).security == ref.access(a)
    assert layout_tuples(flt) == ref.layout()


def test_deleted_record_no_longer_contained():
    cfg = FilterConfig(l=64, b=4)
    flt = AutoCuckooFilter(cfg)
    target = 0xDEAD00
    flt.query_and_update(target)
    fp = flt.fingerprint_of(target)
    cands = flt.candidate_buckets(target)
    for a in rand_addrs(20000, 9):
        ev = flt.query_and_update(a).evicted
        if ev is not None and ev.f_print == fp and ev.bucket in cands:
            break
    else:
        pytest.fail("target never deleted")
    # gone unless another record with the same fingerprint shares a bucket
    remaining = [e for c in set(cands) for e in flt.bucket(c) if e.valid and e.f_print == fp]
    assert flt.contains(target) == bool(remaining)


# --- serialisation and copies ----------------------------------------------------

def test_serialisation_roundtrip():
    cfg = FilterConfig(l=16, b=2, f=8, mnk=2, rng_seed=7)
    flt = AutoCuckooFilter(cfg)
    for a in GOLDEN_SEQUENCE[:20]:
        flt.query_and_update(a)
    data = flt.to_bytes()
    assert len(data) == (16 * 2 * 11 + 7) // 8
    back = AutoCuckooFilter.from_bytes(cfg, data)
    assert back.layout() == flt.layout()
    assert back.to_bytes() == data


def test_serialisation_bit_layout():
    cfg = FilterConfig(l=1, b=2, f=4)
    entries = [FilterEntry(True, 0b1010, 3), FilterEntry(False, 0, 0)]
    data = AutoCuckooFilter.from_layout(cfg, entries).to_bytes()
    # record 1 = 1|1010|11, record 2 = 0000000, then 2 pad bits
    assert data == bytes([0b11010110, 0b00000000])


def test_from_bytes_rejects_wrong_length():
    with pytest.raises(ValueError):
        AutoCuckooFilter.from_bytes(FilterConfig(l=2, b=2, f=8), b"\x00")


def test_copy_is_independent_and_replays_identically():
    flt = AutoCuckooFilter(FilterConfig(l=16, b=2, f=8, mnk=2))
    for a in rand_addrs(40, 10):
        flt.query_and_update(a)
    twin = flt.copy()
    more = rand_addrs(40, 11)
    for a in more:
        flt.query_and_update(a)
    assert twin.layout() != flt.layout()
    for a in more:
        twin.query_and_update(a)
    assert twin.to_bytes() == flt.to_bytes()


# --- properties -----------------------------------------------------------

small_configs = st.builds(
    FilterConfig,
    l=st.sampled_from([1, 2, 4, 16, 64]),
    b=st.integers(1, 4),
    f=st.integers(2, 10),
    mnk=st.integers(0, 5),
    rng_seed=st.integers(0, 2**32),
    hash_seed=st.integers(0, 2**32),
)


@settings(max_examples=60, deadline=None)
@given(cfg=small_configs, seed=st.integers(0, 2**32), n=st.integers(1, 400))
def test_invariants_under_random_streams(cfg, seed, n):
    flt = AutoCuckooFilter(cfg, track_sources=True)
    rng = random.Random(seed)
    pool = rand_addrs(max(2, n // 2), seed)
    for _ in range(n):
        a = rng.choice(pool)
        before = flt.valid_count
        dels = flt.stats.deletions
        r = flt.query_and_update(a)
        # monotone fill, at most one deletion
        assert flt.valid_count >= before
        assert flt.stats.deletions - dels <= 1
        assert (r.evicted is not None) == (flt.stats.deletions - dels == 1)
        assert 0 <= r.security <= cfg.sec_thr
        assert (r.status is Status.PINGPONG) == (r.security == cfg.sec_thr)
        if r.status is Status.INSERTED:
            assert r.security == 0
    # residency: every record sits in a candidate bucket of each address it stands for
    for bucket in range(cfg.l):
        for slot in range(cfg.b):
            e = flt.entry(bucket, slot)
            if not e.valid:
                continue
            for src in flt.sources(bucket, slot):
                assert flt.fingerprint_of(src) == e.f_print
                assert bucket in flt.candidate_buckets(src)


@settings(max_examples=40, deadline=None)
@given(cfg=small_configs, seed=st.integers(0, 2**32))
def test_relocations_bounded_by_mnk(cfg, seed):
    flt = AutoCuckooFilter(cfg)
    rng = random.Random(seed)
    for _ in range(200):
        fp = rng.randrange(1 << cfg.f)
        mu = rng.randrange(cfg.l)
        if flt.contains_record(fp, mu):
            continue
        out = flt.insert_with_relocation(fp, mu)
        assert out.relocations <= cfg.mnk
        assert flt.contains_record(fp, mu) or out.evicted is not None


@settings(max_examples=30, deadline=None)
@given(cfg=small_configs, seed=st.integers(0, 2**32))
def test_deterministic_replay(cfg, seed):
    addrs = rand_addrs(150, seed)
    states = []
    for _ in range(2):
        flt = AutoCuckooFilter(cfg)
        for a in addrs + addrs[::3]:
            flt.query_and_update(a)
        states.append(flt.to_bytes())
    assert states[0] == states[1]


def test_occupancy_no_conflict_regime():
    # far more buckets than insertions: every insertion takes a fresh slot
    cfg = FilterConfig(l=1 << 16, b=8, f=16)
    flt = AutoCuckooFilter(cfg)
    addrs = rand_addrs(2000, 12)
    for a in addrs:
        flt.query_and_update(a)
    assert flt.stats.deletions == 0
    assert flt.occupancy() == pytest.approx(flt.valid_count / cfg.entries)
    assert flt.valid_count == 2000 - flt.stats.merges
