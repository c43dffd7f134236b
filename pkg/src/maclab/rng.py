"""Named random substreams derived from a single master seed.

Every stochastic component of a run (arrivals, erasures, exploration,
parameter init, replay sampling, ...) pulls from its own generator so that
adding or removing draws in one component never perturbs the others.
Streams are identified by a string label plus optional integer indices
(typically the episode number).
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = 0xFFFF_FFFF_FFFF_FFFF


def substream(seed: int, label: str, *indices: int) -> np.random.Generator:
    """Return an independent ``Generator`` for ``(seed, label, *indices)``.

    The mapping is pure: the same arguments always produce a generator with
    the same state, regardless of what other streams were consumed before.
    """
    tag = int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "big")
    entropy = [int(seed) & _MASK64, tag]
    entropy.extend(int(i) & _MASK64 for i in indices)
    return np.random.default_rng(np.random.SeedSequence(entropy))
