"""Additively homomorphic Paillier cryptosystem with a fixed-point codec.

Supports the two homomorphic identities this package relies on:

* product of ciphertexts decrypts to the sum of plaintexts, and
* a ciphertext raised to a plaintext constant decrypts to the product.

Plaintexts live in Z_n.  Real numbers go through :class:`FixedPointCodec`,
which maps signed reals onto Z_n with ``frac_bits`` fractional bits; negative
values occupy the upper half of the range.  One homomorphic multiplication
deepens the scale from ``frac_bits`` to ``2*frac_bits``; the consumer rescales
after decryption.

All randomness is drawn from caller-supplied seeded generators so every
operation is reproducible.
"""

import hashlib
import math
import random
from dataclasses import dataclass

try:
    import gmpy2

    def _powmod(base, exp, mod):
        return int(gmpy2.powmod(base, exp, mod))

    def _invert(a, mod):
        return int(gmpy2.invert(a, mod))

except ImportError:  # pure-python fallback, same semantics, slower

    def _powmod(base, exp, mod):
        return pow(base, exp, mod)

    def _invert(a, mod):
        return pow(a, -1, mod)


from .errors import EncodingRangeError, KeyMismatchError

VALID_KEY_BITS = (64, 128, 256, 512, 1024, 2048)

_SMALL_PRIMES = [3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59,
                 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127,
                 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191,
                 193, 197, 199, 211, 223, 227, 229, 233, 239, 241, 251]

MR_ROUNDS = 40


def _is_probable_prime(n, rng, rounds=MR_ROUNDS):
    """Miller-Rabin with ``rounds`` random witnesses (error < 4^-rounds)."""
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n == p:
            return True
        if n % p == 0:
            return False
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = _powmod(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(r - 1):
            x = (x * x) % n
            if x == n - 1:
                break
        else:
            return False
    return True


def _gen_prime(bits, rng):
    """Random prime of exactly ``bits`` bits (top bit forced)."""
    while True:
        cand = rng.getrandbits(bits) | (1 << (bits - 1)) | 1
        if _is_probable_prime(cand, rng):
            return cand


class PaillierPublicKey:
    """Public half of a keypair.

    Attributes:
        n: RSA-style modulus p*q.
        g: generator, fixed to n+1 which turns g^m into (1 + n*m) mod n^2
           and saves one exponentiation per encryption.
        nsquare: n^2, the ciphertext modulus.
        bits: nominal key size in bits.
        key_id: short opaque identifier derived from n; ciphertexts carry it
            so cross-key operations fail loudly instead of corrupting data.
    """

    def __init__(self, n, bits):
        self.n = n
        self.g = n + 1
        self.nsquare = n * n
        self.bits = bits
        self.half_n = n // 2
        nbytes = n.to_bytes((n.bit_length() + 7) // 8, "big")
        self.key_id = hashlib.sha256(nbytes).hexdigest()[:16]

    def __eq__(self, other):
        return isinstance(other, PaillierPublicKey) and self.n == other.n

    def __hash__(self):
        return hash(self.n)

    def __repr__(self):
        return "PaillierPublicKey(bits=%d, id=%s)" % (self.bits, self.key_id)


class PaillierPrivateKey:
    """Private half: Carmichael exponent ``lam`` and decryption factor ``mu``.

    With g = n+1, L(g^lam mod n^2) = lam mod n, so mu = lam^-1 mod n.
    """

    def __init__(self, public_key, p, q):
        self.public_key = public_key
        self.p = p
        self.q = q
        self.lam = math.lcm(p - 1, q - 1)
        n = public_key.n
        self.mu = _invert(self._L(_powmod(public_key.g, self.lam, public_key.nsquare)), n)

    def _L(self, x):
        return (x - 1) // self.public_key.n

    def __repr__(self):
        return "PaillierPrivateKey(id=%s)" % self.public_key.key_id


@dataclass(frozen=True)
class Ciphertext:
    """An element of Z_{n^2} tagged with the key it belongs to."""

    value: int
    key_id: str


def keygen(bits=128, rng_seed=0):
    """Generate a keypair with primes of bits/2 bits each.

    Deterministic for a given ``rng_seed``.  ``bits`` must be one of
    VALID_KEY_BITS; anything below 64 is rejected as toy-only.
    """
    if bits not in VALID_KEY_BITS:
        raise ValueError(
            "unsupported key size %r (choose from %s)" % (bits, list(VALID_KEY_BITS)))
    rng = random.Random(rng_seed)
    half = bits // 2
    while True:
        p = _gen_prime(half, rng)
        q = _gen_prime(half, rng)
        if p != q:
            break
    return keypair_from_primes(p, q, bits=bits)


def keypair_from_primes(p, q, bits=None):
    """Build a keypair from known primes (handy for small worked examples)."""
    if p == q:
        raise ValueError("p and q must differ")
    n = p * q
    pk = PaillierPublicKey(n, bits if bits is not None else n.bit_length())
    sk = PaillierPrivateKey(pk, p, q)
    return pk, sk


def encrypt(pk, m, rng):
    """Encrypt plaintext m in [0, n) with fresh noise from ``rng``.

    c = (1 + n*m) * r^n mod n^2 with r uniform in (0, n), gcd(r, n) = 1.
    """
    if not 0 <= m < pk.n:
        raise ValueError("plaintext %d outside [0, n)" % m)
    while True:
        r = rng.randrange(1, pk.n)
        if math.gcd(r, pk.n) == 1:
            break
    nude = (1 + pk.n * m) % pk.nsquare
    c = (nude * _powmod(r, pk.n, pk.nsquare)) % pk.nsquare
    return Ciphertext(c, pk.key_id)


def decrypt(sk, c):
    """Recover the plaintext in [0, n).  Rejects foreign-key ciphertexts."""
    pk = sk.public_key
    if c.key_id != pk.key_id:
        raise KeyMismatchError(
            "ciphertext belongs to key %s, not %s" % (c.key_id, pk.key_id))
    u = _powmod(c.value, sk.lam, pk.nsquare)
    return (sk._L(u) * sk.mu) % pk.n


def add(pk, c1, c2):
    """Homomorphic addition: decrypts to (m1 + m2) mod n."""
    if c1.key_id != pk.key_id or c2.key_id != pk.key_id:
        raise KeyMismatchError("operands %s/%s do not match key %s"
                               % (c1.key_id, c2.key_id, pk.key_id))
    return Ciphertext((c1.value * c2.value) % pk.nsquare, pk.key_id)


def scalar_mul(pk, c, k):
    """Homomorphic plaintext multiply: decrypts to (m * k) mod n."""
    if c.key_id != pk.key_id:
        raise KeyMismatchError(
            "ciphertext belongs to key %s, not %s" % (c.key_id, pk.key_id))
    if not 0 <= k < pk.n:
        raise ValueError("scalar %d outside [0, n)" % k)
    return Ciphertext(_powmod(c.value, k, pk.nsquare), pk.key_id)


class FixedPointCodec:
    """Signed fixed-point reals over Z_n with ``frac_bits`` fractional bits.

    encode(v) = round(v * 2^frac_bits) mod n; values with magnitude at or
    above half_n / 2^frac_bits do not fit and are rejected.  decode() treats
    residues >= half_n as negative.  ``scale_bits`` defaults to frac_bits and
    is doubled for values that went through one homomorphic multiplication.
    """

    def __init__(self, n, frac_bits=16):
        if frac_bits < 1:
            raise ValueError("frac_bits must be positive")
        self.n = n
        self.frac_bits = frac_bits
        self.half_n = n // 2

    def encode(self, v):
        m = round(v * (1 << self.frac_bits))
        if abs(m) >= self.half_n:
            raise EncodingRangeError(
                "value %r does not fit in +/- %d with %d fractional bits"
                % (v, self.half_n >> self.frac_bits, self.frac_bits))
        return m % self.n

    def decode(self, m, scale_bits=None):
        if scale_bits is None:
            scale_bits = self.frac_bits
        if not 0 <= m < self.n:
            raise ValueError("encoded value outside [0, n)")
        if m >= self.half_n:
            m -= self.n
        return m / (1 << scale_bits)


# --- wire helpers -----------------------------------------------------------
#
# Big naturals travel as a 4-byte big-endian length followed by the magnitude
# bytes, most significant first.  Zero is a bare zero length.

def write_biguint(x):
    if x < 0:
        raise ValueError("negative value")
    if x == 0:
        return b"\x00\x00\x00\x00"
    mag = x.to_bytes((x.bit_length() + 7) // 8, "big")
    return len(mag).to_bytes(4, "big") + mag


def read_biguint(buf, offset=0):
    """Return (value, next_offset)."""
    n = int.from_bytes(buf[offset:offset + 4], "big")
    offset += 4
    if len(buf) < offset + n:
        raise ValueError("truncated big natural")
    return int.from_bytes(buf[offset:offset + n], "big"), offset + n


def serialize_public_key(pk):
    return pk.bits.to_bytes(4, "big") + write_biguint(pk.n)


def deserialize_public_key(buf, offset=0):
    bits = int.from_bytes(buf[offset:offset + 4], "big")
    n, offset = read_biguint(buf, offset + 4)
    return PaillierPublicKey(n, bits), offset
