"""Named-stream RNG splitting.

Every source of randomness in a run derives from one root seed plus a
stream name ("partition", "hs", "client.3.round.7.epoch.0", ...).  Stream
derivation is a pure function of (root_seed, name) via SHA-256, so the
same stream can be re-opened from any process in any order.  No code in
this package touches numpy's global RNG.
"""

import hashlib

import numpy as np


def stream_seed(root_seed: int, name: str) -> int:
    """Derive a 64-bit seed for the named stream. Stable across processes."""
    digest = hashlib.sha256(f"{root_seed}|{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream_rng(root_seed: int, name: str) -> np.random.Generator:
    """Open a Generator for the named stream."""
    digest = hashlib.sha256(f"{root_seed}|{name}".encode()).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([root_seed & 0xFFFFFFFF] + words)))
