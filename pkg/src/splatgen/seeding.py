"""Named-stream seed splitting.

A single global seed is expanded into independent per-module sub-seeds by
hashing ``(seed, stream name)``. Adding a new named stream never perturbs the
draws of existing ones, which keeps end-to-end runs bit-reproducible as the
pipeline grows.
"""

import hashlib

import numpy as np
import torch

_MASK64 = (1 << 64) - 1


def substream_seed(seed: int, name: str) -> int:
    """Derive a 64-bit sub-seed for a named stream from the global seed."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _MASK64


def numpy_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name))


def torch_generator(seed: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(substream_seed(seed, name) & ((1 << 63) - 1))
    return gen
