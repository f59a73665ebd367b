"""Privacy layer for the interactive step of split training.

The passive party encrypts its bottom-stack output cellwise under its own
key.  The active party, which holds the interactive-layer weights in
plaintext, evaluates its peer's slice of that layer directly on ciphertexts:

    cell(r, o) = sum_i enc[r,i] ^ encode(W[o,i])  *  Enc(mask[r,o] << f)

i.e. a fixed-point matrix product (scale doubles from f to 2f fractional
bits) plus a fresh additive mask.  The masked ciphertexts go back to the
passive party, which can decrypt but sees only mask-shifted values; the
active party subtracts its masks from the returned plaintexts and rescales.
Every encrypted grid carries an explicit scale so a 2f value can never be
mistaken for an f one.
"""

import random
from dataclasses import dataclass

import numpy as np

from . import paillier
from .errors import EncodingRangeError, KeyMismatchError, ScaleMismatchError

DEFAULT_MASK_RANGE = float(1 << 20)


@dataclass
class EncryptedActivation:
    """A (rows x cols) grid of ciphertexts at one fixed-point scale."""

    cells: list  # list of rows, each a list of Ciphertext
    scale_bits: int
    key_id: str

    @property
    def shape(self):
        return (len(self.cells), len(self.cells[0]) if self.cells else 0)

    def transposed(self):
        rows, cols = self.shape
        cells = [[self.cells[r][c] for r in range(rows)] for c in range(cols)]
        return EncryptedActivation(cells, self.scale_bits, self.key_id)


class MaskState:
    """Per-exchange additive masks, kept as their fixed-point encodings.

    Masks are drawn uniformly from [-mask_range, mask_range].  The range is
    deliberately bounded: the masked sums must survive a round trip through
    an IEEE-754 binary64 wire grid and must not wrap the plaintext ring, so
    the full encoded range is unusable.  Within those limits the masks still
    blind every cell (checked by the soundness test).
    """

    def __init__(self, noise_encoded, codec, rng_seed):
        self.noise_encoded = noise_encoded  # list of lists of ring elements
        self.codec = codec
        self.rng_seed = rng_seed

    @classmethod
    def generate(cls, rows, cols, codec, rng_seed, mask_range=DEFAULT_MASK_RANGE):
        f = codec.frac_bits
        if 2.0 * mask_range * (1 << (2 * f)) >= codec.half_n:
            raise EncodingRangeError(
                "mask range %g leaves no headroom at scale 2^%d under this key"
                % (mask_range, 2 * f))
        rng = random.Random(rng_seed)
        enc = [[codec.encode(rng.uniform(-mask_range, mask_range))
                for _ in range(cols)] for _ in range(rows)]
        return cls(enc, codec, rng_seed)

    def real_values(self):
        """The masks as floats (exactly the decoded encodings, so
        subtraction cancels the mask with zero residual)."""
        f = self.codec.frac_bits
        return np.array([[self.codec.decode(s, f) for s in row]
                         for row in self.noise_encoded])


def encrypt_activation(x, pk, codec, rng):
    """Cellwise encode+encrypt a real matrix; result is at scale frac_bits."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a 2-D activation matrix")
    cells = [[paillier.encrypt(pk, codec.encode(v), rng) for v in row] for row in x]
    return EncryptedActivation(cells, codec.frac_bits, pk.key_id)


def decrypt_activation(ea, sk, codec):
    """Decrypt a grid at whatever scale it carries."""
    return np.array([[codec.decode(paillier.decrypt(sk, c), ea.scale_bits)
                      for c in row] for row in ea.cells])


def homomorphic_linear(ea, weights, mask, pk, codec):
    """enc @ weights.T + Enc(mask << f), computed under encryption.

    ``ea`` must be at scale frac_bits; the result is at 2*frac_bits.
    ``weights`` is (out x in) plaintext; ``mask`` covers (rows x out).
    """
    f = codec.frac_bits
    if ea.scale_bits != f:
        raise ScaleMismatchError("operand is at scale 2^%d, expected 2^%d"
                                 % (ea.scale_bits, f))
    if ea.key_id != pk.key_id:
        raise KeyMismatchError("activation key %s does not match %s"
                               % (ea.key_id, pk.key_id))
    weights = np.asarray(weights, dtype=np.float64)
    rows, dim = ea.shape
    out_dim = weights.shape[0]
    if weights.shape[1] != dim:
        raise ValueError("weights are %r but activations have %d columns"
                         % (weights.shape, dim))
    if len(mask.noise_encoded) != rows or len(mask.noise_encoded[0]) != out_dim:
        raise ValueError("mask shape does not cover the output grid")
    w_enc = [[codec.encode(weights[o, i]) for i in range(dim)]
             for o in range(out_dim)]
    nsq = pk.nsquare
    rng = random.Random(mask.rng_seed ^ 0x5eed)
    out_cells = []
    for r in range(rows):
        row_cells = []
        enc_row = ea.cells[r]
        for o in range(out_dim):
            m_shift = (mask.noise_encoded[r][o] << f) % pk.n
            acc = paillier.encrypt(pk, m_shift, rng).value
            w_row = w_enc[o]
            for i in range(dim):
                acc = (acc * paillier.scalar_mul(pk, enc_row[i], w_row[i]).value) % nsq
            row_cells.append(paillier.Ciphertext(acc, pk.key_id))
        out_cells.append(row_cells)
    return EncryptedActivation(out_cells, 2 * f, pk.key_id)


def unmask(masked_plain, mask):
    """Remove the additive masks from decrypted plaintexts."""
    grid = np.asarray(masked_plain, dtype=np.float64)
    return grid - mask.real_values()


def masked_decrypt_exchange(enc_masked, sk, mask, codec):
    """In-memory version of the decrypt round trip.

    The key owner decrypts the masked grid (seeing only value+mask); the
    mask holder subtracts.  Returns (owner_view, unmasked_values).
    """
    owner_view = decrypt_activation(enc_masked, sk, codec)
    return owner_view, unmask(owner_view, mask)


def secure_interactive_forward(x, weights, pk, sk, codec, enc_seed, mask_seed,
                               mask_range=DEFAULT_MASK_RANGE):
    """Whole forward exchange in one call (for tests and local evaluation)."""
    ea = encrypt_activation(x, pk, codec, random.Random(enc_seed))
    mask = MaskState.generate(ea.shape[0], np.asarray(weights).shape[0], codec,
                              mask_seed, mask_range)
    masked = homomorphic_linear(ea, weights, mask, pk, codec)
    _, values = masked_decrypt_exchange(masked, sk, mask, codec)
    return values


# --- wire form ---------------------------------------------------------------
#
# Grid payload: rows (4B) | cols (4B) | scale_bits (1B) | key id (16B ascii)
# then rows*cols ciphertexts as length-prefixed big naturals.

def encode_encrypted_grid(ea):
    rows, cols = ea.shape
    head = rows.to_bytes(4, "big") + cols.to_bytes(4, "big") + \
        ea.scale_bits.to_bytes(1, "big") + ea.key_id.encode()
    body = b"".join(paillier.write_biguint(c.value)
                    for row in ea.cells for c in row)
    return head + body


def decode_encrypted_grid(buf, pk):
    rows = int.from_bytes(buf[0:4], "big")
    cols = int.from_bytes(buf[4:8], "big")
    scale_bits = buf[8]
    key_id = buf[9:25].decode()
    if key_id != pk.key_id:
        raise KeyMismatchError("grid was encrypted under key %s, not %s"
                               % (key_id, pk.key_id))
    offset = 25
    cells = []
    for _ in range(rows):
        row = []
        for _ in range(cols):
            value, offset = paillier.read_biguint(buf, offset)
            row.append(paillier.Ciphertext(value, key_id))
        cells.append(row)
    return EncryptedActivation(cells, scale_bits, key_id)
