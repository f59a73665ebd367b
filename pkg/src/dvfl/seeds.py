"""Deterministic seed derivation.

Every source of randomness in a run is a pure function of the master seed
and a short label path, so independent workers (possibly in different
processes) agree on derived streams without coordination.
"""

import hashlib


def derive_seed(*parts):
    """Collapse a label path into a 64-bit seed."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        if isinstance(p, bytes):
            chunk = p
        else:
            chunk = str(p).encode()
        h.update(len(chunk).to_bytes(4, "big"))
        h.update(chunk)
    return int.from_bytes(h.digest(), "big")
