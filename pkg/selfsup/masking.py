"""
masking.py
----------

Blind-spot masking for self-supervised denoising.  A fixed share of
voxels is removed (set to zero) at random positions; with
``substitute=True`` each removed voxel instead takes the value of a
random neighbour from its 3x3x3 surroundings.

The number of masked voxels is ``round(fraction * n)``, so the masked
share never drifts with the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from utils.rng import SeedLike, derived_rng
from volume.core import Volume3

ArrayOrVolume = Union[np.ndarray, Volume3]


@dataclass(frozen=True)
class MaskPattern:
    mask: np.ndarray
    target_fraction: float
    seed: Tuple[int, ...]

    @property
    def masked_fraction(self) -> float:
        return float(self.mask.mean())


def _seed_tuple(seed: SeedLike) -> Tuple[int, ...]:
    if isinstance(seed, (int, np.integer)):
        return (int(seed),)
    return tuple(int(s) for s in seed)


def random_mask(shape: Tuple[int, ...], fraction: float, seed: SeedLike) -> MaskPattern:
    """Draw a pattern with exactly ``round(fraction * size)`` masked voxels."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f'mask fraction must lie in (0, 1), got {fraction}')
    seeds = _seed_tuple(seed)
    rng = derived_rng(seeds)
    size = int(np.prod(shape))
    count = int(round(fraction * size))
    flat = np.zeros(size, dtype=bool)
    flat[rng.permutation(size)[:count]] = True
    mask = flat.reshape(shape)
    mask.setflags(write=False)
    return MaskPattern(mask=mask, target_fraction=fraction, seed=seeds)


def _neighbour_values(arr: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    idx = np.argwhere(mask)
    offsets = rng.integers(-1, 2, size=idx.shape)
    # Redraw the zero offset so a voxel never substitutes itself.
    zero = ~offsets.any(axis=1)
    while zero.any():
        offsets[zero] = rng.integers(-1, 2, size=(int(zero.sum()), idx.shape[1]))
        zero = ~offsets.any(axis=1)
    src = np.clip(idx + offsets, 0, np.asarray(arr.shape) - 1)
    return arr[tuple(src.T)]


def n2v_mask(vol: ArrayOrVolume, fraction: float = 0.5, seed: SeedLike = 0,
             substitute: bool = False) -> Tuple[ArrayOrVolume, MaskPattern]:
    """Remove ``fraction`` of the voxels of ``vol``.

    Returns the masked copy (same type as the input) and its pattern.
    """
    arr = vol.data if isinstance(vol, Volume3) else np.asarray(vol, dtype=np.float64)
    pattern = random_mask(arr.shape, fraction, seed)
    out = np.array(arr, dtype=np.float64, copy=True)
    if substitute:
        rng = derived_rng(pattern.seed + (1,))
        out[pattern.mask] = _neighbour_values(arr, pattern.mask, rng)
    else:
        out[pattern.mask] = 0.0
    if isinstance(vol, Volume3):
        return vol.with_data(out), pattern
    return out, pattern


__all__ = ['MaskPattern', 'random_mask', 'n2v_mask']
