"""Seed derivation.

Every random stream in the package comes from one base seed plus a label and
a tuple of indices, so a stream can be recreated without replaying any other.
"""

import zlib

import numpy as np


def _label_code(label):
    return zlib.crc32(label.encode("utf-8"))


def seed_sequence(base_seed, label, *indices):
    ints = [int(base_seed) & 0xFFFFFFFFFFFFFFFF, _label_code(label)]
    ints.extend(int(i) for i in indices)
    return np.random.SeedSequence(ints)


def derive_rng(base_seed, label, *indices):
    """Generator for the stream ``(base_seed, label, *indices)``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(base_seed, label, *indices)))


def derive_seed(base_seed, label, *indices):
    """Integer seed (63 bits) for the stream ``(base_seed, label, *indices)``."""
    state = seed_sequence(base_seed, label, *indices).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
