"""Deterministic seed derivation and RNG construction.

Every source of randomness in a run (weight init, per-stage block init,
head init, per-epoch shuffling, augmentation) draws from its own stream,
derived from the run seed plus a stable string label. Derivation uses
SHA-256 rather than Python's salted ``hash`` so streams are reproducible
across processes and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_MASK64 = (1 << 64) - 1


def derive_seed(base_seed: int, *labels) -> int:
    """Derive a 63-bit child seed from ``base_seed`` and a label path."""
    h = hashlib.sha256()
    h.update(str(int(base_seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little") & (_MASK64 >> 1)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed))
    return gen


def numpy_generator(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))


def enable_determinism() -> None:
    """Opt in to torch's deterministic kernels for reproducible runs."""
    torch.use_deterministic_algorithms(True, warn_only=False)
