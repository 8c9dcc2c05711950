"""Deterministic seed derivation.

A single master seed fans out into independent per-stage seeds via the
splitmix64 finalizer, so one ``--seed`` flag reproduces a whole run.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master: int, *tags: int | str) -> int:
    """Derive a 64-bit child seed from ``master`` and a path of tags."""
    s = int(master) & _MASK
    for tag in tags:
        if isinstance(tag, str):
            tag = zlib.crc32(tag.encode("utf-8"))
        s = splitmix64(s ^ splitmix64(int(tag) & _MASK))
    return s


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & _MASK))
