"""Deterministic seed derivation.

A master seed fans out into named child streams (corpus, model init,
batch order, dropout, strategy sampling, probing, ...) so that any stage
can be re-run in isolation and still see exactly the draws it saw inside
the full pipeline.
"""

import hashlib

import numpy as np


def derive_seed(master: int, label: str) -> int:
    """Map (master seed, stream label) to a 64-bit child seed via SHA-256."""
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_stream(master: int, label: str) -> np.random.Generator:
    """A fresh PCG64 generator for the named child stream."""
    return np.random.default_rng(derive_seed(master, label))
