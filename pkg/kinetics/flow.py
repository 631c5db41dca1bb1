"""
flow.py
-------

Conversions from kinetic rates to myocardial blood flow (MBF):

* Rb-82 uptake follows the generalised Renkin-Crone extraction model
  ``K1 = MBF * (1 - a * exp(-b / MBF))`` with ``a = 0.74``, ``b = 0.51``;
  MBF is recovered from K1 by bisection.
* For water the efflux rate times the partition coefficient 0.91 ml/g
  gives MBF directly.

The myocardial flow reserve (MFR) is the stress to rest MBF ratio.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np
from scipy.optimize import bisect  # type: ignore

from utils.errors import ConvergenceError

RENKIN_A = 0.74
RENKIN_B = 0.51
WATER_PARTITION = 0.91
INVERSION_TOL = 1e-8


@dataclass(frozen=True)
class FlowResult:
    mbf: float
    source: str = 'rb82'
    label: str = ''

    def __post_init__(self) -> None:
        if self.source not in ('rb82', 'water'):
            raise ValueError(f'source must be rb82 or water, got {self.source!r}')
        if not self.mbf >= 0:
            raise ValueError(f'MBF must be nonnegative, got {self.mbf}')


def renkin_crone_forward(mbf: float) -> float:
    """K1 (ml/min/g) for a flow ``mbf`` (ml/min/g)."""
    if not mbf > 0:
        raise ValueError(f'MBF must be positive, got {mbf}')
    return float(mbf * (1.0 - RENKIN_A * np.exp(-RENKIN_B / mbf)))


def mbf_from_k1(k1: float) -> float:
    """Invert :func:`renkin_crone_forward` by bisection on ``[k1, k1 / (1 - a)]``.

    Raises
    ------
    ValueError
        If ``k1 <= 0``.
    ConvergenceError
        If the bracketed root does not satisfy ``|forward(mbf) - k1| < 1e-8``.
    """
    if not k1 > 0:
        raise ValueError(f'K1 must be positive, got {k1}')
    lo, hi = float(k1), float(k1) / (1.0 - RENKIN_A)

    def f(m: float) -> float:
        return renkin_crone_forward(m) - k1

    root = float(bisect(f, lo, hi, xtol=1e-12, maxiter=200))
    residual = abs(f(root))
    if residual >= INVERSION_TOL:
        raise ConvergenceError(f'Renkin-Crone inversion residual {residual:.3g}', residual)
    return root


def mbf_map(k1: np.ndarray) -> np.ndarray:
    """Voxelwise :func:`mbf_from_k1`; voxels with ``K1 <= 0`` map to zero flow."""
    src = np.asarray(k1, dtype=np.float64)
    out = np.zeros(src.shape)
    flat_in, flat_out = src.reshape(-1), out.reshape(-1)
    solved: Dict[float, float] = {}
    for i in np.flatnonzero(flat_in > 0):
        value = float(flat_in[i])
        if value not in solved:
            solved[value] = mbf_from_k1(value)
        flat_out[i] = solved[value]
    return out


def water_mbf(k2_water: float) -> float:
    """MBF from the water efflux rate (1/min)."""
    if k2_water < 0:
        raise ValueError(f'k2 must be nonnegative, got {k2_water}')
    return WATER_PARTITION * float(k2_water)


def mfr(stress_mbf: float, rest_mbf: float) -> float:
    """Myocardial flow reserve; ``rest_mbf`` must be positive."""
    if not rest_mbf > 0:
        raise ValueError(f'rest MBF must be positive, got {rest_mbf}')
    return float(stress_mbf) / float(rest_mbf)


__all__ = [
    'RENKIN_A',
    'RENKIN_B',
    'WATER_PARTITION',
    'FlowResult',
    'renkin_crone_forward',
    'mbf_from_k1',
    'mbf_map',
    'water_mbf',
    'mfr',
]
