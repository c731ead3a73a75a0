"""Deterministic seed derivation.

Every random stream in the pipeline is keyed by ``(root seed, stage, item)``
and hashed with BLAKE2b, so adding or reordering samples never perturbs the
streams of the others.
"""
import hashlib

import numpy as np
import torch


def derive_seed(root, *keys):
    """Return a 63-bit seed from a root seed and any number of string-able keys."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode())
    for k in keys:
        h.update(b"\x1f")
        h.update(str(k).encode())
    return int.from_bytes(h.digest(), "little") >> 1


def numpy_rng(root, *keys):
    return np.random.default_rng(derive_seed(root, *keys))


def torch_generator(seed):
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g
