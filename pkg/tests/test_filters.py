"""Bloom / garbled-Bloom filter checks.

Sizing values are frozen from the closed-form expressions
m = ceil(-n ln fp / ln^2 2), k = ceil((m/n) ln 2); the false-positive
experiment is judged against (1 - e^{-kn/m})^k evaluated inline.
"""

import hashlib
import math

import numpy as np
import pytest

from dvfl import filters
from dvfl.errors import FilterBuildError


def _ids(n, tag=b"x", start=0):
    return [b"%s-%08d" % (tag, i) for i in range(start, start + n)]


def test_sizing_frozen_values():
    p = filters.FilterParams.from_target(1000, 0.01)
    assert (p.m, p.k) == (9586, 7)
    p = filters.FilterParams.from_target(10000, 1e-6)
    assert (p.m, p.k) == (287552, 20)
    p = filters.FilterParams.from_target(100, 0.001)
    assert (p.m, p.k) == (1438, 10)
    with pytest.raises(ValueError):
        filters.FilterParams.from_target(100, 0.0)


def test_analytic_fp_matches_formula():
    p = filters.FilterParams.from_target(1000, 0.01)
    expect = (1 - math.exp(-p.k * 1000 / p.m)) ** p.k
    assert abs(p.analytic_fp(1000) - expect) < 1e-15


def test_position_derivation_is_double_hashing():
    # independent recomputation of the slot-position schedule
    item = b"some-identifier"
    seed = (424242).to_bytes(8, "big")
    digest = hashlib.blake2b(item, key=seed, person=b"slot-pos",
                             digest_size=16).digest()
    h1 = int.from_bytes(digest[:8], "big")
    h2 = int.from_bytes(digest[8:], "big")
    expect = [(h1 + i * h2) % 9586 for i in range(7)]
    assert filters.positions(item, 9586, 7, 424242) == expect


def test_bloom_membership_and_fresh_filter():
    params = filters.FilterParams.from_target(500, 0.01)
    bf = filters.BloomFilter.build(_ids(500), params, hash_seed=1)
    assert all(bf.query(i) for i in _ids(500))
    fresh = filters.BloomFilter(params.m, params.k, hash_seed=1)
    assert not any(fresh.query(i) for i in _ids(50))
    assert fresh.popcount == 0
    assert 0 < bf.popcount <= 500 * params.k


def test_bloom_false_positive_rate_monte_carlo():
    n = 1000
    params = filters.FilterParams.from_target(n, 0.01)
    bf = filters.BloomFilter.build(_ids(n), params, hash_seed=7)
    trials = 100000
    hits = sum(bf.query(i) for i in _ids(trials, tag=b"nonmember"))
    rate = hits / trials
    analytic = params.analytic_fp(n)
    assert analytic / 10 <= rate <= 3 * analytic, (rate, analytic)


def test_bloom_deterministic_bytes():
    params = filters.FilterParams.from_target(200, 0.01)
    a = filters.serialize_bf(filters.BloomFilter.build(_ids(200), params, 3))
    b = filters.serialize_bf(filters.BloomFilter.build(_ids(200), params, 3))
    assert a == b


def test_gbf_single_item_slots_xor_to_fingerprint():
    params = filters.FilterParams.from_target(4, 0.01)
    gbf = filters.gbf_build([b"only-item"], params, hash_seed=11, rng_seed=0)
    assert gbf.query(b"only-item")
    pos = sorted(set(filters.positions(b"only-item", gbf.m, gbf.k, gbf.hash_seed)))
    acc = bytes(gbf.sigma // 8)
    for p in pos:
        acc = bytes(x ^ y for x, y in zip(acc, gbf.slots[p].tobytes()))
    seed = gbf.hash_seed.to_bytes(8, "big")
    fingr = hashlib.blake2b(b"only-item", key=seed, person=b"gbf-fingr",
                            digest_size=16).digest()
    assert acc == fingr


def test_gbf_membership_and_nonmembership():
    params = filters.FilterParams.from_target(500, 1e-6)
    gbf = filters.gbf_build(_ids(500), params, hash_seed=21, rng_seed=1)
    assert all(gbf.query(i) for i in _ids(500))
    assert not any(gbf.query(i) for i in _ids(500, tag=b"other"))


def test_gbf_unused_slots_are_randomized():
    params = filters.FilterParams.from_target(8, 0.01)
    gbf = filters.gbf_build(_ids(2), params, hash_seed=5, rng_seed=2)
    zero = bytes(gbf.slots.shape[1])
    n_zero = sum(1 for s in gbf.slots if s.tobytes() == zero)
    # ~70 mostly-noise slots of 16 random bytes: a zero slot is a 2^-128 event
    assert n_zero == 0


def test_gbf_deterministic_bytes():
    params = filters.FilterParams.from_target(300, 0.01)
    a = filters.serialize_gbf(filters.gbf_build(_ids(300), params, 9, 4))
    b = filters.serialize_gbf(filters.gbf_build(_ids(300), params, 9, 4))
    assert a == b


def test_gbf_wrong_seed_hides_membership():
    params = filters.FilterParams.from_target(100, 1e-6)
    gbf = filters.gbf_build(_ids(100), params, hash_seed=1, rng_seed=3)
    other = filters.GarbledBloomFilter(gbf.m, gbf.k, gbf.sigma,
                                       gbf.hash_seed + 1000, gbf.slots)
    assert not any(other.query(i) for i in _ids(100))


def test_empty_build():
    params = filters.FilterParams.from_target(10, 0.01)
    bf = filters.BloomFilter.build([], params, 1)
    gbf = filters.gbf_build([], params, 1, 5)
    assert not bf.query(b"a")
    assert not gbf.query(b"a")


def test_capacity_overflow_rejected():
    params = filters.FilterParams.from_target(10, 0.01)
    with pytest.raises(ValueError):
        filters.gbf_build(_ids(11), params, 1, 6)


def test_build_failure_reported():
    # one slot, two items that cannot both reserve it
    params = filters.FilterParams(expected_items=2, fp_target=0.5, m=1, k=1)
    with pytest.raises(FilterBuildError):
        filters.gbf_build([b"a", b"b"], params, 1, 7)


def test_sigma_choices():
    params = filters.FilterParams.from_target(50, 0.01)
    for sigma in (64, 128):
        gbf = filters.gbf_build(_ids(50), params, 13, 7, sigma=sigma)
        assert gbf.slots.shape == (params.m, sigma // 8)
        assert all(gbf.query(i) for i in _ids(50))
    with pytest.raises(ValueError):
        filters.gbf_build(_ids(5), params, 13, 7, sigma=100)


def test_serialization_roundtrips():
    params = filters.FilterParams.from_target(64, 0.01)
    bf = filters.BloomFilter.build(_ids(64), params, 77)
    buf = filters.serialize_bf(bf)
    back = filters.deserialize_bf(buf)
    assert (back.m, back.k, back.hash_seed) == (bf.m, bf.k, 77)
    assert np.array_equal(back.bits, bf.bits)

    gbf = filters.gbf_build(_ids(64), params, 77, 8)
    buf = filters.serialize_gbf(gbf)
    back = filters.deserialize_gbf(buf)
    assert (back.m, back.k, back.sigma, back.hash_seed) == \
        (gbf.m, gbf.k, gbf.sigma, gbf.hash_seed)
    assert np.array_equal(back.slots, gbf.slots)

    with pytest.raises(ValueError):
        filters.deserialize_gbf(filters.serialize_bf(bf))
    with pytest.raises(ValueError):
        filters.deserialize_bf(filters.serialize_gbf(gbf))
