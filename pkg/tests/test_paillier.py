"""Additively homomorphic cipher + fixed-point codec checks.

Expected values are frozen from independent recomputation: plain modular
arithmetic for the homomorphic identities, numpy for the dot product.
"""

import math
import random

import numpy as np
import pytest

from dvfl import paillier
from dvfl.errors import EncodingRangeError, KeyMismatchError


@pytest.fixture(scope="module")
def toy():
    # worked example small enough to verify by hand: p=11, q=13
    return paillier.keypair_from_primes(11, 13)


@pytest.fixture(scope="module")
def key128():
    return paillier.keygen(128, rng_seed=1234)


def test_toy_key_structure(toy):
    pk, sk = toy
    assert pk.n == 143
    assert pk.g == 144
    assert pk.nsquare == 20449
    assert sk.lam == math.lcm(10, 12) == 60


def test_exhaustive_roundtrip_toy_modulus(toy):
    pk, sk = toy
    rng = random.Random(0)
    for m in range(pk.n):
        assert paillier.decrypt(sk, paillier.encrypt(pk, m, rng)) == m


def test_add_worked_examples(toy):
    pk, sk = toy
    rng = random.Random(1)
    c = paillier.add(pk, paillier.encrypt(pk, 15, rng), paillier.encrypt(pk, 20, rng))
    assert paillier.decrypt(sk, c) == 35
    # sums reduce modulo n: 100 + 100 = 200 = 57 (mod 143)
    c = paillier.add(pk, paillier.encrypt(pk, 100, rng), paillier.encrypt(pk, 100, rng))
    assert paillier.decrypt(sk, c) == 57


def test_scalar_mul_worked_examples(toy):
    pk, sk = toy
    rng = random.Random(2)
    c = paillier.encrypt(pk, 9, rng)
    assert paillier.decrypt(sk, paillier.scalar_mul(pk, c, 7)) == 63
    assert paillier.decrypt(sk, paillier.scalar_mul(pk, c, 0)) == 0
    assert paillier.decrypt(sk, paillier.scalar_mul(pk, c, 1)) == 9


def test_add_is_ciphertext_product(toy):
    pk, _ = toy
    rng = random.Random(3)
    c1 = paillier.encrypt(pk, 4, rng)
    c2 = paillier.encrypt(pk, 5, rng)
    assert paillier.add(pk, c1, c2).value == (c1.value * c2.value) % pk.nsquare


def test_scalar_mul_is_ciphertext_power(toy):
    pk, _ = toy
    rng = random.Random(4)
    c = paillier.encrypt(pk, 6, rng)
    assert paillier.scalar_mul(pk, c, 11).value == pow(c.value, 11, pk.nsquare)


def test_homomorphic_identities_random(key128):
    pk, sk = key128
    rng = random.Random(99)
    for _ in range(200):
        m1 = rng.randrange(pk.n)
        m2 = rng.randrange(pk.n)
        k = rng.randrange(pk.n)
        s = paillier.add(pk, paillier.encrypt(pk, m1, rng),
                         paillier.encrypt(pk, m2, rng))
        assert paillier.decrypt(sk, s) == (m1 + m2) % pk.n
        p = paillier.scalar_mul(pk, paillier.encrypt(pk, m1, rng), k)
        assert paillier.decrypt(sk, p) == (m1 * k) % pk.n


def test_keygen_deterministic():
    pk1, _ = paillier.keygen(128, rng_seed=7)
    pk2, _ = paillier.keygen(128, rng_seed=7)
    pk3, _ = paillier.keygen(128, rng_seed=8)
    assert pk1.n == pk2.n
    assert pk1.n != pk3.n


def test_keygen_prime_sizes():
    for bits in (64, 128, 256):
        pk, sk = paillier.keygen(bits, rng_seed=5)
        assert sk.p.bit_length() == bits // 2
        assert sk.q.bit_length() == bits // 2
        assert sk.p != sk.q
        assert abs(pk.n.bit_length() - bits) <= 1


def test_keygen_rejects_unsupported_sizes():
    for bits in (0, 32, 100, 4096):
        with pytest.raises(ValueError):
            paillier.keygen(bits, rng_seed=1)


def test_encryption_is_randomized(key128):
    pk, _ = key128
    rng = random.Random(6)
    seen = {paillier.encrypt(pk, 42, rng).value for _ in range(100)}
    assert len(seen) >= 99


def test_plaintext_range_enforced(toy):
    pk, _ = toy
    rng = random.Random(7)
    with pytest.raises(ValueError):
        paillier.encrypt(pk, pk.n, rng)
    with pytest.raises(ValueError):
        paillier.encrypt(pk, -1, rng)
    c = paillier.encrypt(pk, 1, rng)
    with pytest.raises(ValueError):
        paillier.scalar_mul(pk, c, pk.n)


def test_foreign_key_material_rejected(toy, key128):
    pk_a, sk_a = toy
    pk_b, _ = key128
    rng = random.Random(8)
    c_a = paillier.encrypt(pk_a, 3, rng)
    c_b = paillier.encrypt(pk_b, 3, rng)
    with pytest.raises(KeyMismatchError):
        paillier.add(pk_a, c_a, c_b)
    with pytest.raises(KeyMismatchError):
        paillier.scalar_mul(pk_b, c_a, 2)
    with pytest.raises(KeyMismatchError):
        paillier.decrypt(sk_a, c_b)


# --- fixed-point codec -------------------------------------------------------

def test_codec_worked_examples(key128):
    pk, _ = key128
    codec = paillier.FixedPointCodec(pk.n, frac_bits=16)
    assert codec.encode(0.0) == 0
    assert codec.encode(1.5) == 98304            # 1.5 * 2^16
    assert codec.encode(-1.5) == pk.n - 98304    # negatives in the top half
    assert codec.decode(codec.encode(-1.5)) == -1.5


def test_codec_negatives_live_in_upper_half(key128):
    pk, _ = key128
    codec = paillier.FixedPointCodec(pk.n, frac_bits=16)
    rng = random.Random(9)
    for _ in range(200):
        v = -rng.uniform(1e-4, 1e6)
        assert codec.encode(v) >= codec.half_n


def test_codec_roundtrip_error_bound(key128):
    pk, _ = key128
    codec = paillier.FixedPointCodec(pk.n, frac_bits=16)
    rng = random.Random(10)
    worst = 0.0
    for _ in range(10000):
        v = rng.uniform(-1000.0, 1000.0)
        worst = max(worst, abs(codec.decode(codec.encode(v)) - v))
    assert worst <= 2.0 ** -16


def test_codec_range_error(key128):
    pk, _ = key128
    codec = paillier.FixedPointCodec(pk.n, frac_bits=16)
    with pytest.raises(EncodingRangeError):
        codec.encode(float(pk.n))  # far beyond half_n / 2^16


def test_codec_scale_doubling_after_multiply(key128):
    pk, sk = key128
    codec = paillier.FixedPointCodec(pk.n, frac_bits=16)
    rng = random.Random(11)
    c = paillier.encrypt(pk, codec.encode(2.5), rng)
    prod = paillier.scalar_mul(pk, c, codec.encode(-3.0))
    got = codec.decode(paillier.decrypt(sk, prod), scale_bits=32)
    assert abs(got - (-7.5)) <= 2.0 ** -15


def test_encrypted_dot_product(key128):
    pk, sk = key128
    codec = paillier.FixedPointCodec(pk.n, frac_bits=16)
    rng = random.Random(12)
    nprng = np.random.default_rng(12)
    for _ in range(20):
        dim = int(nprng.integers(1, 17))
        u = nprng.uniform(-2.0, 2.0, dim)
        w = nprng.uniform(-2.0, 2.0, dim)
        acc = None
        for i in range(dim):
            term = paillier.scalar_mul(pk, paillier.encrypt(pk, codec.encode(u[i]), rng),
                                       codec.encode(w[i]))
            acc = term if acc is None else paillier.add(pk, acc, term)
        got = codec.decode(paillier.decrypt(sk, acc), scale_bits=32)
        bound = 2.0 ** -16 * (dim + 2) * 4.0
        assert abs(got - float(u @ w)) <= bound


# --- serialization -----------------------------------------------------------

def test_biguint_wire_format():
    assert paillier.write_biguint(0) == b"\x00\x00\x00\x00"
    assert paillier.write_biguint(0x01ff) == b"\x00\x00\x00\x02\x01\xff"
    for x in (0, 1, 255, 256, 143, 2**128 + 12345):
        buf = paillier.write_biguint(x)
        got, off = paillier.read_biguint(buf)
        assert got == x and off == len(buf)
    with pytest.raises(ValueError):
        paillier.read_biguint(b"\x00\x00\x00\x05abc")
    with pytest.raises(ValueError):
        paillier.write_biguint(-1)


def test_public_key_serialization(key128):
    pk, _ = key128
    buf = paillier.serialize_public_key(pk)
    got, off = paillier.deserialize_public_key(buf)
    assert got.n == pk.n and got.bits == pk.bits and got.key_id == pk.key_id
    assert off == len(buf)
