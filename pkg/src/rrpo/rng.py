"""Seeding conventions.

All randomness is drawn from numpy's PCG64 bit generator
(``numpy.random.default_rng``). Sub-seeds are derived as the first eight
bytes (big-endian) of ``sha256(f"{seed}/{label1}/{label2}/...")``, so a
single global seed fans out into independent, named streams.
"""

import hashlib

import numpy as np

PRNG_NAME = "numpy-PCG64"
SEED_SCHEME = "sha256-v1"


def derive_seed(seed, *labels):
    text = "/".join([str(int(seed))] + [str(x) for x in labels])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def make_rng(seed, *labels):
    return np.random.default_rng(derive_seed(seed, *labels) if labels else int(seed))
