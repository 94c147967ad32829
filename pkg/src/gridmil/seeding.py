"""Named, independent random substreams derived from one master seed.

Every source of randomness in a run (data generation, parameter init, mask
sampling, epoch shuffling, ...) pulls from its own named stream, so toggling
one component never reshuffles the others.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Deterministic generator for the (seed, name) pair."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), tag])))
