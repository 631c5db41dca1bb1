"""
kernels.py
----------

Voxelised positron range kernels.

A :class:`RangeKernel` is a nonnegative, unit-sum volume with odd dims
whose centre voxel is the emission point.  Kernels are built from an
:class:`~physics.transport.AnnihilationCloud` by trilinear deposition
and can be exported with a JSON sidecar describing how they were made.

Example:

    cloud = simulate_positrons(rb82, muscle, 300_000, seed=7)
    kernel = build_kernel(cloud, (2.036, 2.036, 2.0), auto_kernel_dims(cloud, (2.036, 2.036, 2.0)))
    store_kernel(kernel, 'out/h_rb82.json')
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from physics.isotopes import NuclearData, load_nuclear_data
from physics.transport import AnnihilationCloud, mean_range, simulate_positrons
from utils.errors import GeometryError, VolumeFormatError
from utils.logging_utils import get_logger
from volume.core import Dims, Spacing, Volume3
from volume.io import load_volume, store_volume

logger = get_logger(__name__)

SUM_TOLERANCE = 1e-9
DEFAULT_COVERAGE = 0.995


@dataclass(frozen=True)
class RangeKernel:
    """Normalised 3-D blur kernel centred on its middle voxel."""

    volume: Volume3
    meta: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        data = self.volume.data
        if any(d % 2 == 0 for d in self.volume.dims):
            raise GeometryError(f'kernel dims must be odd, got {self.volume.dims}')
        if np.any(data < 0):
            raise GeometryError('kernel has negative entries')
        total = float(data.sum())
        if abs(total - 1.0) > SUM_TOLERANCE:
            raise GeometryError(f'kernel sums to {total!r}, expected 1')

    @classmethod
    def from_array(cls, values: np.ndarray, voxel_size: Sequence[float],
                   meta: Optional[Dict[str, Any]] = None) -> 'RangeKernel':
        """Clip negatives, normalise to unit sum and wrap ``values``."""
        arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, None)
        total = arr.sum()
        if total <= 0:
            raise GeometryError('kernel has no positive mass')
        vol = Volume3(arr / total, tuple(voxel_size))  # type: ignore[arg-type]
        return cls(vol, dict(meta or {}))

    @property
    def data(self) -> np.ndarray:
        return self.volume.data

    @property
    def dims(self) -> Dims:
        return self.volume.dims

    @property
    def voxel_size(self) -> Spacing:
        return self.volume.voxel_size

    @property
    def half_width(self) -> Tuple[int, int, int]:
        hx, hy, hz = ((d - 1) // 2 for d in self.dims)
        return (hx, hy, hz)

    def is_delta(self) -> bool:
        hx, hy, hz = self.half_width
        return bool(self.data[hx, hy, hz] == 1.0 and np.count_nonzero(self.data) == 1)

    def mirror_asymmetry(self) -> float:
        """Largest relative difference between point-mirrored voxel pairs."""
        a = self.data
        b = a[::-1, ::-1, ::-1]
        denom = np.maximum(np.maximum(a, b), 1e-300)
        rel = np.where((a > 0) | (b > 0), np.abs(a - b) / denom, 0.0)
        return float(rel.max())


def delta_kernel(dims: Sequence[int], voxel_size: Sequence[float]) -> RangeKernel:
    arr = np.zeros(tuple(int(d) for d in dims))
    if any(d % 2 == 0 for d in arr.shape):
        raise GeometryError(f'kernel dims must be odd, got {arr.shape}')
    arr[tuple(d // 2 for d in arr.shape)] = 1.0
    return RangeKernel(Volume3(arr, tuple(voxel_size)), {'kind': 'delta'})  # type: ignore[arg-type]


def gaussian_kernel(dims: Sequence[int], sigma_vox: float | Sequence[float],
                    voxel_size: Sequence[float] = (1.0, 1.0, 1.0)) -> RangeKernel:
    """Sampled, normalised Gaussian with per-axis ``sigma_vox`` in voxels."""
    sig = np.broadcast_to(np.asarray(sigma_vox, dtype=np.float64), (3,))
    axes = []
    for d, s in zip(dims, sig):
        h = (int(d) - 1) // 2
        x = np.arange(-h, h + 1, dtype=np.float64)
        axes.append(np.exp(-0.5 * (x / s) ** 2) if s > 0 else (x == 0).astype(np.float64))
    arr = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return RangeKernel.from_array(arr, voxel_size, {'kind': 'gaussian', 'sigma_vox': sig.tolist()})


def kernel_moments(kernel: RangeKernel) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(first, second)``: mean offset and per-axis variance, in voxels."""
    first = np.zeros(3)
    second = np.zeros(3)
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        marginal = kernel.data.sum(axis=other)
        h = (marginal.size - 1) // 2
        x = np.arange(-h, h + 1, dtype=np.float64)
        first[axis] = float((marginal * x).sum())
        second[axis] = float((marginal * (x - first[axis]) ** 2).sum())
    return first, second


def _grid_coords(points_mm: np.ndarray, voxel_size: Sequence[float],
                 dims: Sequence[int]) -> np.ndarray:
    centre = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    return points_mm / np.asarray(voxel_size, dtype=np.float64) + centre


def escaping_fraction(cloud: AnnihilationCloud, voxel_size: Sequence[float],
                      dims: Sequence[int]) -> float:
    """Share of end points that fall outside the span of the voxel centres."""
    g = _grid_coords(cloud.endpoints, voxel_size, dims)
    upper = np.asarray(dims, dtype=np.float64) - 1.0
    inside = np.all((g >= 0.0) & (g <= upper), axis=1)
    return float(1.0 - inside.mean())


def auto_kernel_dims(cloud: AnnihilationCloud, voxel_size: Sequence[float],
                     coverage: float = DEFAULT_COVERAGE, max_dim: int = 99) -> Dims:
    """Smallest odd cubic-in-voxels grid keeping ``coverage`` of the end points."""
    g = np.abs(cloud.endpoints / np.asarray(voxel_size, dtype=np.float64))
    reach = g.max(axis=1)
    for half in range(0, (max_dim - 1) // 2 + 1):
        if (reach <= half).mean() >= coverage:
            return (2 * half + 1, 2 * half + 1, 2 * half + 1)
    raise GeometryError(f'no kernel up to {max_dim} voxels covers {coverage:.1%} of end points')


def build_kernel(cloud: AnnihilationCloud, voxel_size: Sequence[float], dims: Sequence[int],
                 min_coverage: float = DEFAULT_COVERAGE) -> RangeKernel:
    """Trilinearly deposit the end points on the grid and normalise.

    Raises
    ------
    GeometryError
        If a dimension is even, or if more than ``1 - min_coverage`` of
        the end points fall outside the grid.  The message reports the
        escaping fraction.
    """
    dims_t = tuple(int(d) for d in dims)
    if len(dims_t) != 3 or any(d <= 0 or d % 2 == 0 for d in dims_t):
        raise GeometryError(f'kernel dims must be three odd positive integers, got {dims}')
    escaping = escaping_fraction(cloud, voxel_size, dims_t)
    if escaping > 1.0 - min_coverage + 1e-12:
        raise GeometryError(
            f'kernel grid {dims_t} too small: {escaping:.3%} of end points escape '
            f'(at most {1.0 - min_coverage:.3%} allowed)'
        )
    g = _grid_coords(cloud.endpoints, voxel_size, dims_t)
    upper = np.asarray(dims_t, dtype=np.float64) - 1.0
    g = g[np.all((g >= 0.0) & (g <= upper), axis=1)]
    base = np.minimum(np.floor(g), np.maximum(upper - 1.0, 0.0)).astype(np.int64)
    frac = g - base
    grid = np.zeros(dims_t)
    flat = grid.reshape(-1)
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                w = (
                    (frac[:, 0] if cx else 1.0 - frac[:, 0])
                    * (frac[:, 1] if cy else 1.0 - frac[:, 1])
                    * (frac[:, 2] if cz else 1.0 - frac[:, 2])
                )
                idx = base + np.array([cx, cy, cz])
                ok = np.all(idx < np.asarray(dims_t), axis=1) & (w > 0)
                lin = np.ravel_multi_index(idx[ok].T, dims_t)
                flat += np.bincount(lin, weights=w[ok], minlength=flat.size)
    meta = {
        'isotope': cloud.isotope,
        'tissue': cloud.tissue,
        'n': cloud.count,
        'seed': cloud.seed,
        'mean_range_mm': mean_range(cloud) if cloud.count else 0.0,
        'escaping_fraction': escaping,
    }
    return RangeKernel.from_array(grid, voxel_size, meta)


def symmetrize_kernel(kernel: RangeKernel) -> RangeKernel:
    """Average a kernel with its point mirror (isotropic medium)."""
    data = 0.5 * (kernel.data + kernel.data[::-1, ::-1, ::-1])
    return RangeKernel.from_array(data, kernel.voxel_size, dict(kernel.meta, symmetrized=True))


def simulate_kernel(isotope: str, tissue: str, n: int, seed: int,
                    voxel_size: Sequence[float] = (2.036, 2.036, 2.0),
                    dims: Optional[Sequence[int]] = None, n_jobs: int = 1,
                    symmetrize: bool = True,
                    data: Optional[NuclearData] = None) -> RangeKernel:
    """Simulate a cloud and voxelise it; ``dims=None`` picks the smallest covering grid."""
    data = data or load_nuclear_data()
    iso = data.isotope(isotope)
    med = data.tissue(tissue)
    cloud = simulate_positrons(iso, med, n, seed=seed, n_jobs=n_jobs, data=data)
    grid_dims = tuple(dims) if dims is not None else auto_kernel_dims(cloud, voxel_size)
    kernel = build_kernel(cloud, voxel_size, grid_dims)
    kernel.meta['nuclear_data_version'] = data.version
    logger.info('%s kernel in %s: mean range %.4f mm, dims %s', iso.label, med.label,
                kernel.meta['mean_range_mm'], grid_dims)
    return symmetrize_kernel(kernel) if symmetrize else kernel


def _sidecar_path(path: str) -> str:
    root, _ = os.path.splitext(path)
    return root + '.sidecar.json'


def store_kernel(kernel: RangeKernel, path: str) -> None:
    """Write the kernel volume plus a ``.sidecar.json`` with its provenance."""
    store_volume(kernel.volume, path)
    sidecar = {k: kernel.meta.get(k) for k in ('isotope', 'tissue', 'n', 'seed', 'mean_range_mm')}
    sidecar.update({k: v for k, v in kernel.meta.items() if k not in sidecar})
    with open(_sidecar_path(path), 'w', encoding='utf-8') as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)


def load_kernel(path: str) -> RangeKernel:
    """Read a kernel; it is renormalised after the float32 round trip."""
    vol = load_volume(path)
    meta: Dict[str, Any] = {}
    side = _sidecar_path(path)
    if os.path.exists(side):
        with open(side, 'r', encoding='utf-8') as f:
            meta = json.load(f)
    try:
        return RangeKernel.from_array(vol.data, vol.voxel_size, meta)
    except GeometryError as exc:
        raise VolumeFormatError(f'{path}: not a valid kernel: {exc}') from exc


__all__ = [
    'RangeKernel',
    'delta_kernel',
    'gaussian_kernel',
    'kernel_moments',
    'escaping_fraction',
    'auto_kernel_dims',
    'build_kernel',
    'symmetrize_kernel',
    'simulate_kernel',
    'store_kernel',
    'load_kernel',
]
