"""
transport.py
------------

Simplified condensed-history Monte Carlo of positrons in an infinite
uniform medium.

Each positron is emitted at the origin with an energy drawn from the
allowed beta+ spectrum (Fermi function included) and an isotropic
direction.  Transport then proceeds in water-equivalent mass thickness:

* a step ends where the kinetic energy has fallen to ``E * (1 - f)``;
  its length is the difference of CSDA ranges at both ends;
* after each step the direction is deflected by a polar angle drawn from
  a 2-D Gaussian whose width combines a scaled Highland multiple
  scattering term with an energy independent angular diffusion term;
* below the cutoff energy the positron travels its residual CSDA range
  along the current direction and annihilates.

Mass thickness is converted to millimetres at the very end with the
tissue's electron-density-scaled density, so one seed gives exactly
scaled clouds across tissues.

Work is split into fixed-size chunks, each drawing from its own Philox
stream keyed by ``(seed, chunk_id)``; clouds are therefore identical for
any number of joblib workers.

Example:

    data = load_nuclear_data()
    cloud = simulate_positrons(data.isotope('rb82'), data.tissue('striated'),
                               300_000, seed=7, n_jobs=4)
    print(mean_range(cloud))
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from joblib import Parallel, delayed  # type: ignore

from physics.isotopes import (
    ELECTRON_MASS_MEV,
    FINE_STRUCTURE,
    Isotope,
    NuclearData,
    Tissue,
    load_nuclear_data,
)
from utils.errors import DegenerateInputError
from utils.logging_utils import get_logger
from utils.rng import derived_rng

logger = get_logger(__name__)


@dataclass(frozen=True)
class AnnihilationCloud:
    """Annihilation end points (mm) relative to the emission point."""

    endpoints: np.ndarray
    isotope: str = ''
    tissue: str = ''
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        pts = np.array(self.endpoints, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DegenerateInputError(f'endpoints must have shape (n, 3), got {pts.shape}')
        if not np.all(np.isfinite(pts)):
            raise DegenerateInputError('endpoints contain non-finite values')
        pts.setflags(write=False)
        object.__setattr__(self, 'endpoints', pts)

    @property
    def count(self) -> int:
        return int(self.endpoints.shape[0])


def spectrum_density(energy_mev: np.ndarray, isotope: Isotope) -> np.ndarray:
    """Unnormalised allowed beta+ spectrum ``p W (E0 - E)^2 F(Z, E)``."""
    e = np.asarray(energy_mev, dtype=np.float64)
    out = np.zeros_like(e)
    inside = (e > 0) & (e < isotope.endpoint_mev)
    w = e[inside] / ELECTRON_MASS_MEV + 1.0
    p = np.sqrt(w * w - 1.0)
    beta = p / w
    # Non-relativistic Fermi function for positrons (repulsive daughter).
    x = 2.0 * math.pi * isotope.daughter_z * FINE_STRUCTURE / beta
    with np.errstate(over='ignore'):
        fermi = x / np.expm1(x)
    out[inside] = p * w * (isotope.endpoint_mev - e[inside]) ** 2 * fermi
    return out


@lru_cache(maxsize=8)
def _spectrum_table(isotope: Isotope, points: int) -> Tuple[np.ndarray, np.ndarray]:
    grid = np.linspace(0.0, isotope.endpoint_mev, points + 1)
    dens = spectrum_density(grid, isotope)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]))])
    cdf /= cdf[-1]
    grid.setflags(write=False)
    cdf.setflags(write=False)
    return grid, cdf


def sample_beta_energy(isotope: Isotope, rng: np.random.Generator,
                       size: Optional[int] = None,
                       data: Optional[NuclearData] = None) -> np.ndarray | float:
    """Draw kinetic energies (MeV) from the allowed spectrum by inverse CDF.

    Every draw lies strictly inside ``(0, endpoint)``.  Returns a float
    when ``size`` is None, otherwise an array of ``size`` draws.
    """
    data = data or load_nuclear_data()
    grid, cdf = _spectrum_table(isotope, data.transport.spectrum_grid_points)
    n = 1 if size is None else int(size)
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=n)
    energies = np.interp(u, cdf, grid)
    return float(energies[0]) if size is None else energies


def _highland_width(energy: np.ndarray, step: np.ndarray, data: NuclearData) -> np.ndarray:
    tc = data.transport
    w = energy / ELECTRON_MASS_MEV + 1.0
    p_mev = np.sqrt(w * w - 1.0) * ELECTRON_MASS_MEV
    beta = p_mev / (w * ELECTRON_MASS_MEV)
    t = step / tc.radiation_length_g_cm2
    width = np.zeros_like(energy)
    ok = t > 0
    width[ok] = (
        13.6 / (beta[ok] * p_mev[ok]) * np.sqrt(t[ok])
        * np.clip(1.0 + 0.038 * np.log(t[ok]), 0.0, None)
    )
    return np.sqrt((tc.highland_scale * width) ** 2 + step / tc.diffusion_length_g_cm2)


def _deflect(u: np.ndarray, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Rotate unit directions ``u`` (n, 3) by polar ``theta`` and azimuth ``phi``."""
    ux, uy, uz = u[:, 0], u[:, 1], u[:, 2]
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    out = np.empty_like(u)
    normal = uz * uz < 0.999999
    tmp = np.sqrt(1.0 - uz[normal] * uz[normal])
    n = normal
    out[n, 0] = st[n] * (ux[n] * uz[n] * cp[n] - uy[n] * sp[n]) / tmp + ux[n] * ct[n]
    out[n, 1] = st[n] * (uy[n] * uz[n] * cp[n] + ux[n] * sp[n]) / tmp + uy[n] * ct[n]
    out[n, 2] = -st[n] * cp[n] * tmp + uz[n] * ct[n]
    p = ~normal
    out[p, 0] = st[p] * cp[p]
    out[p, 1] = st[p] * sp[p]
    out[p, 2] = np.where(uz[p] > 0, ct[p], -ct[p])
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def _transport_chunk(isotope: Isotope, n: int, seed: int, chunk_id: int,
                     energy_override: Optional[float], data: NuclearData) -> np.ndarray:
    """Return end points in water-equivalent g/cm2 for one chunk."""
    rng = derived_rng(seed, chunk_id)
    tc = data.transport
    r_of = data.range_energy
    if energy_override is None:
        energy = np.asarray(sample_beta_energy(isotope, rng, size=n, data=data))
    else:
        energy = np.full(n, float(energy_override))
    cos_t = 2.0 * rng.random(n) - 1.0
    phi = 2.0 * math.pi * rng.random(n)
    sin_t = np.sqrt(1.0 - cos_t * cos_t)
    direction = np.column_stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t])
    pos = np.zeros((n, 3))

    active = np.flatnonzero(energy > tc.cutoff_mev)
    while active.size:
        e = energy[active]
        e_next = e * (1.0 - tc.energy_loss_fraction)
        step = r_of(e) - r_of(e_next)
        pos[active] += direction[active] * step[:, None]
        theta = _highland_width(e, step, data) * np.sqrt(-2.0 * np.log1p(-rng.random(active.size)))
        az = 2.0 * math.pi * rng.random(active.size)
        direction[active] = _deflect(direction[active], theta, az)
        energy[active] = e_next
        active = active[e_next > tc.cutoff_mev]
    pos += direction * r_of(energy)[:, None]
    return pos


def simulate_positrons(isotope: Isotope, tissue: Tissue, n: int, seed: int = 0,
                       n_jobs: int = 1, energy_override: Optional[float] = None,
                       data: Optional[NuclearData] = None) -> AnnihilationCloud:
    """Simulate ``n`` positrons and return their annihilation end points in mm.

    Parameters
    ----------
    isotope, tissue : Isotope, Tissue
        Emitter and uniform medium.
    n : int
        Number of positrons, at least 1.
    seed : int
        Root seed; chunk ``i`` draws from the stream ``(seed, i)``.
    n_jobs : int
        joblib workers.  The result does not depend on this value.
    energy_override : float, optional
        Test hook replacing sampled energies with a fixed value (MeV).
    """
    if n < 1:
        raise DegenerateInputError(f'need at least one positron, got n={n}')
    data = data or load_nuclear_data()
    chunk = data.transport.chunk_size
    sizes = [min(chunk, n - start) for start in range(0, n, chunk)]
    logger.info('Simulating %d %s positrons in %s (%d chunks, %d jobs)',
                n, isotope.label, tissue.label, len(sizes), n_jobs)
    parts = Parallel(n_jobs=n_jobs)(
        delayed(_transport_chunk)(isotope, size, seed, i, energy_override, data)
        for i, size in enumerate(sizes)
    )
    mass_pos = np.concatenate(parts, axis=0)
    mm_per_g_cm2 = 10.0 / tissue.effective_density(data.water_z_over_a)
    return AnnihilationCloud(mass_pos * mm_per_g_cm2, isotope=isotope.name,
                             tissue=tissue.name, seed=seed)


def mean_range(cloud: AnnihilationCloud) -> float:
    """Arithmetic mean of the end-point distances from the origin, mm."""
    if cloud.count == 0:
        raise DegenerateInputError('mean range of an empty cloud')
    return float(np.linalg.norm(cloud.endpoints, axis=1).mean())


__all__ = [
    'AnnihilationCloud',
    'spectrum_density',
    'sample_beta_energy',
    'simulate_positrons',
    'mean_range',
]
