"""Bloom filters and garbled Bloom filters over byte-string ids.

Both filter kinds share one position function: a keyed 128-bit hash of the id
is split into two 64-bit halves H1, H2 and expanded by double hashing,
position_i = (H1 + i*H2) mod m for i in 0..k-1.  A garbled filter stores an
XOR share in every touched slot such that XORing the (distinct) positions of
a member id reconstructs that id's sigma-bit fingerprint; slots never written
during construction are filled with uniform noise, making member and
non-member slots indistinguishable.
"""

import hashlib
import logging
import math
import random
from dataclasses import dataclass

import numpy as np

from .errors import FilterBuildError

log = logging.getLogger(__name__)

DEFAULT_SIGMA = 128
GBF_BUILD_RETRIES = 8


def _keyed_digest(item, hash_seed, person):
    key = hash_seed.to_bytes(8, "big")
    return hashlib.blake2b(item, key=key, person=person, digest_size=16).digest()


def positions(item, m, k, hash_seed):
    """The k slot indices for ``item`` (with multiplicity)."""
    d = _keyed_digest(item, hash_seed, b"slot-pos")
    h1 = int.from_bytes(d[:8], "big")
    h2 = int.from_bytes(d[8:], "big")
    return [(h1 + i * h2) % m for i in range(k)]


def encode_sigma(item, sigma, hash_seed):
    """sigma-bit fingerprint of ``item`` as bytes (sigma must be a multiple of 8)."""
    key = hash_seed.to_bytes(8, "big")
    return hashlib.blake2b(item, key=key, person=b"gbf-fingr",
                           digest_size=sigma // 8).digest()


@dataclass(frozen=True)
class FilterParams:
    """Shared sizing for one BF/GBF pair.

    m = ceil(-n * ln(fp) / ln(2)^2), k = ceil((m/n) * ln 2), where n is the
    expected number of items (floored at 1 so empty inputs stay well-defined).
    """

    expected_items: int
    fp_target: float
    m: int
    k: int

    @classmethod
    def from_target(cls, expected_items, fp_target=1e-6):
        if not 0.0 < fp_target < 1.0:
            raise ValueError("fp_target must lie in (0, 1)")
        n = max(1, expected_items)
        m = math.ceil(-n * math.log(fp_target) / (math.log(2) ** 2))
        k = math.ceil((m / n) * math.log(2))
        return cls(expected_items, fp_target, m, k)

    def analytic_fp(self, n_inserted=None):
        """(1 - e^(-k n / m))^k for the actual insert count."""
        n = self.expected_items if n_inserted is None else n_inserted
        return (1.0 - math.exp(-self.k * n / self.m)) ** self.k


class BloomFilter:
    """Plain bit-per-slot membership filter (one-sided error: false positives)."""

    def __init__(self, m, k, hash_seed):
        self.m = m
        self.k = k
        self.hash_seed = hash_seed
        self.bits = np.zeros(m, dtype=bool)

    def insert(self, item):
        for p in positions(item, self.m, self.k, self.hash_seed):
            self.bits[p] = True

    def query(self, item):
        return all(self.bits[p] for p in positions(item, self.m, self.k, self.hash_seed))

    @property
    def popcount(self):
        return int(self.bits.sum())

    @classmethod
    def build(cls, items, params, hash_seed):
        bf = cls(params.m, params.k, hash_seed)
        for it in items:
            bf.insert(it)
        return bf


class GarbledBloomFilter:
    """XOR-share filter: slots is a (m, sigma/8) uint8 array."""

    def __init__(self, m, k, sigma, hash_seed, slots):
        self.m = m
        self.k = k
        self.sigma = sigma
        self.hash_seed = hash_seed
        self.slots = slots

    def query(self, item):
        """True iff the XOR of the item's slots equals its fingerprint."""
        pos = sorted(set(positions(item, self.m, self.k, self.hash_seed)))
        acc = np.bitwise_xor.reduce(self.slots[pos], axis=0)
        return acc.tobytes() == encode_sigma(item, self.sigma, self.hash_seed)


def _try_gbf_build(items, params, sigma, hash_seed, rng):
    m, k = params.m, params.k
    width = sigma // 8
    slots = np.zeros((m, width), dtype=np.uint8)
    assigned = np.zeros(m, dtype=bool)
    for item in items:
        pos = sorted(set(positions(item, m, k, hash_seed)))
        share = bytearray(encode_sigma(item, sigma, hash_seed))
        free = [p for p in pos if not assigned[p]]
        if not free:
            acc = np.bitwise_xor.reduce(slots[pos], axis=0)
            if acc.tobytes() != bytes(share):
                return None  # all slots taken and inconsistent: retry
            continue
        reserve = free[-1]
        for p in pos:
            if p == reserve:
                continue
            if not assigned[p]:
                slots[p] = np.frombuffer(rng.randbytes(width), dtype=np.uint8)
                assigned[p] = True
            for j in range(width):
                share[j] ^= slots[p, j]
        slots[reserve] = np.frombuffer(bytes(share), dtype=np.uint8)
        assigned[reserve] = True
    # unwritten slots get uniform noise so they are indistinguishable
    n_blank = int(m - assigned.sum())
    if n_blank:
        noise = np.frombuffer(rng.randbytes(n_blank * width),
                              dtype=np.uint8).reshape(n_blank, width)
        slots[~assigned] = noise
    return slots


def gbf_build(items, params, hash_seed, rng_seed, sigma=DEFAULT_SIGMA):
    """Build a garbled filter; retries with stepped hash seeds on collision.

    Returns the filter; its ``hash_seed`` attribute is the seed that finally
    worked and must be shared with whoever builds the matching Bloom filter.
    """
    if sigma % 8 != 0:
        raise ValueError("sigma must be a multiple of 8")
    if len(items) > max(1, params.expected_items):
        raise ValueError("item count %d exceeds sized capacity %d"
                         % (len(items), params.expected_items))
    ordered = sorted(items)
    for attempt in range(GBF_BUILD_RETRIES + 1):
        seed = hash_seed + attempt
        rng = random.Random("%d:%d" % (rng_seed, attempt))
        slots = _try_gbf_build(ordered, params, sigma, seed, rng)
        if slots is not None:
            if attempt:
                log.warning("gbf build needed %d retries (seed now %d)", attempt, seed)
            return GarbledBloomFilter(params.m, params.k, sigma, seed, slots)
    raise FilterBuildError(
        "garbled filter construction failed %d times; m=%d k=%d items=%d"
        % (GBF_BUILD_RETRIES + 1, params.m, params.k, len(items)))


# --- serialization ----------------------------------------------------------
#
# Header: m (8B) | k (2B) | sigma (2B, zero for plain Bloom) | hash_seed (8B),
# all big-endian, then the payload: packed bits (MSB-first) for a Bloom
# filter, or m * sigma/8 slot bytes for a garbled one.

def serialize_bf(bf):
    head = (bf.m.to_bytes(8, "big") + bf.k.to_bytes(2, "big")
            + (0).to_bytes(2, "big") + bf.hash_seed.to_bytes(8, "big"))
    return head + np.packbits(bf.bits).tobytes()


def deserialize_bf(buf):
    m = int.from_bytes(buf[0:8], "big")
    k = int.from_bytes(buf[8:10], "big")
    sigma = int.from_bytes(buf[10:12], "big")
    if sigma != 0:
        raise ValueError("not a plain Bloom filter payload")
    hash_seed = int.from_bytes(buf[12:20], "big")
    bf = BloomFilter(m, k, hash_seed)
    packed = np.frombuffer(buf[20:20 + (m + 7) // 8], dtype=np.uint8)
    bf.bits = np.unpackbits(packed, count=m).astype(bool)
    return bf


def serialize_gbf(gbf):
    head = (gbf.m.to_bytes(8, "big") + gbf.k.to_bytes(2, "big")
            + gbf.sigma.to_bytes(2, "big") + gbf.hash_seed.to_bytes(8, "big"))
    return head + gbf.slots.tobytes()


def deserialize_gbf(buf):
    m = int.from_bytes(buf[0:8], "big")
    k = int.from_bytes(buf[8:10], "big")
    sigma = int.from_bytes(buf[10:12], "big")
    if sigma == 0:
        raise ValueError("not a garbled filter payload")
    hash_seed = int.from_bytes(buf[12:20], "big")
    width = sigma // 8
    slots = np.frombuffer(buf[20:20 + m * width], dtype=np.uint8).reshape(m, width).copy()
    return GarbledBloomFilter(m, k, sigma, hash_seed, slots)
