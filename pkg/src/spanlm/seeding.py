"""Named RNG substream derivation so one master seed drives every component."""

from __future__ import annotations

import zlib

import numpy as np

# Fixed labels used by the CLI; anything else is fair game for library callers.
CORPUS = "corpus"
TRAIN = "train"
DECODE = "decode"


def derive_seed(master_seed: int, label: str, index: int = 0) -> int:
    """Map (master seed, substream label, index) to a stable 63-bit seed."""
    ss = np.random.SeedSequence([int(master_seed), zlib.crc32(label.encode("utf-8")), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF)


def rng_for(master_seed: int, label: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, label, index))
