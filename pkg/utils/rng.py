"""
rng.py
------

Counter-based random streams.  Every parallel unit of work (a Monte
Carlo chunk, a noise frame, a teacher pass) draws from its own Philox
stream keyed by ``(seed, *keys)``, so results never depend on how work
is spread over joblib workers.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

SeedLike = Union[int, Sequence[int]]


def _entropy(seed: SeedLike) -> list[int]:
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


def derived_rng(seed: SeedLike, *keys: int) -> np.random.Generator:
    """Return a Philox generator keyed by ``seed`` and the extra integer ``keys``."""
    entropy = _entropy(seed) + [int(k) for k in keys]
    if any(e < 0 for e in entropy):
        raise ValueError(f'seeds and stream keys must be non-negative, got {entropy}')
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derived_seed(seed: SeedLike, *keys: int) -> int:
    """A 32-bit integer seed for a sub-task keyed by ``(seed, *keys)``."""
    entropy = _entropy(seed) + [int(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


__all__ = ['SeedLike', 'derived_rng', 'derived_seed']
