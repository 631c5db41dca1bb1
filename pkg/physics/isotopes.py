"""
isotopes.py
-----------

Typed access to ``config/nuclear_data.yaml``: isotopes, tissues, the
range-energy relation and the transport constants, plus radioactive
decay helpers used by the phantom generator.

Usage:

    from physics.isotopes import load_nuclear_data
    data = load_nuclear_data()
    rb82 = data.isotope('rb82')
    muscle = data.tissue('striated')
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict

import numpy as np

from utils.config_loader import load_config
from utils.errors import ConfigError

HERE = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
NUCLEAR_DATA_PATH = os.path.join(HERE, 'config', 'nuclear_data.yaml')

ELECTRON_MASS_MEV = 0.51099895
FINE_STRUCTURE = 1.0 / 137.035999


@dataclass(frozen=True)
class Isotope:
    name: str
    label: str
    endpoint_mev: float
    daughter_z: int
    half_life_s: float

    def __post_init__(self) -> None:
        if self.endpoint_mev <= 0:
            raise ConfigError(f'{self.name}: beta endpoint energy must be positive')
        if self.half_life_s <= 0:
            raise ConfigError(f'{self.name}: half-life must be positive')


@dataclass(frozen=True)
class Tissue:
    name: str
    label: str
    density_g_cm3: float
    z_over_a: float

    def __post_init__(self) -> None:
        if self.density_g_cm3 <= 0:
            raise ConfigError(f'{self.name}: density must be positive')

    def effective_density(self, water_z_over_a: float) -> float:
        """Water-equivalent density from the electron-density ratio."""
        return self.density_g_cm3 * self.z_over_a / water_z_over_a


@dataclass(frozen=True)
class RangeEnergy:
    """Piecewise empirical CSDA range of positrons in water, g/cm2."""

    low_a: float
    low_b: float
    low_c: float
    split_mev: float
    high_slope: float
    high_offset: float

    def __call__(self, energy_mev: np.ndarray) -> np.ndarray:
        e = np.asarray(energy_mev, dtype=np.float64)
        out = np.zeros_like(e)
        pos = e > 0
        low = pos & (e <= self.split_mev)
        el = e[low]
        out[low] = self.low_a * el ** (self.low_b - self.low_c * np.log(el))
        high = e > self.split_mev
        out[high] = self.high_slope * e[high] - self.high_offset
        return out


@dataclass(frozen=True)
class TransportConstants:
    energy_loss_fraction: float
    cutoff_mev: float
    radiation_length_g_cm2: float
    highland_scale: float
    diffusion_length_g_cm2: float
    spectrum_grid_points: int
    chunk_size: int


@dataclass(frozen=True)
class NuclearData:
    version: int
    isotopes: Dict[str, Isotope]
    tissues: Dict[str, Tissue]
    water_z_over_a: float
    range_energy: RangeEnergy
    transport: TransportConstants

    def isotope(self, name: str) -> Isotope:
        key = name.lower().replace('-', '')
        if key not in self.isotopes:
            raise ConfigError(f'unknown isotope {name!r}; known: {sorted(self.isotopes)}')
        return self.isotopes[key]

    def tissue(self, name: str) -> Tissue:
        key = name.lower()
        if key not in self.tissues:
            raise ConfigError(f'unknown tissue {name!r}; known: {sorted(self.tissues)}')
        return self.tissues[key]


@lru_cache(maxsize=4)
def load_nuclear_data(path: str = NUCLEAR_DATA_PATH) -> NuclearData:
    """Parse the nuclear data file; results are cached per path."""
    doc = load_config(path)
    if not doc:
        raise ConfigError(f'nuclear data file missing or empty: {path}')
    try:
        isotopes = {
            key: Isotope(
                name=key,
                label=str(v.get('label', key)),
                endpoint_mev=float(v['endpoint_mev']),
                daughter_z=int(v['daughter_z']),
                half_life_s=float(v['half_life_s']),
            )
            for key, v in doc['isotopes'].items()
        }
        tissues = {
            key: Tissue(
                name=key,
                label=str(v.get('label', key)),
                density_g_cm3=float(v['density_g_cm3']),
                z_over_a=float(v['z_over_a']),
            )
            for key, v in doc['tissues'].items()
        }
        re = doc['range_energy']
        tr = doc['transport']
        return NuclearData(
            version=int(doc.get('version', 0)),
            isotopes=isotopes,
            tissues=tissues,
            water_z_over_a=float(doc['water_z_over_a']),
            range_energy=RangeEnergy(**{k: float(v) for k, v in re.items()}),
            transport=TransportConstants(
                energy_loss_fraction=float(tr['energy_loss_fraction']),
                cutoff_mev=float(tr['cutoff_mev']),
                radiation_length_g_cm2=float(tr['radiation_length_g_cm2']),
                highland_scale=float(tr['highland_scale']),
                diffusion_length_g_cm2=float(tr['diffusion_length_g_cm2']),
                spectrum_grid_points=int(tr['spectrum_grid_points']),
                chunk_size=int(tr['chunk_size']),
            ),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f'malformed nuclear data in {path}: {exc}') from exc


def decay_at(t_s: np.ndarray | float, half_life_s: float) -> np.ndarray:
    """Surviving fraction ``2 ** (-t / T_half)``."""
    return np.exp2(-np.asarray(t_s, dtype=np.float64) / half_life_s)


def decay_factor(start_s: np.ndarray | float, end_s: np.ndarray | float,
                 half_life_s: float) -> np.ndarray:
    """Frame-mean surviving fraction over ``[start_s, end_s]``."""
    start = np.asarray(start_s, dtype=np.float64)
    end = np.asarray(end_s, dtype=np.float64)
    lam = np.log(2.0) / half_life_s
    return np.exp(-lam * start) * (-np.expm1(-lam * (end - start))) / (lam * (end - start))


__all__ = [
    'Isotope',
    'Tissue',
    'RangeEnergy',
    'TransportConstants',
    'NuclearData',
    'load_nuclear_data',
    'decay_at',
    'decay_factor',
    'ELECTRON_MASS_MEV',
    'FINE_STRUCTURE',
]
