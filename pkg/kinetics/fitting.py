"""
fitting.py
----------

Basis-function fitting of the one-tissue model to voxel or region TACs.

For every basis curve ``B_j`` the model is linear in
``theta1 = Vb`` and ``theta2 = (1 - Vb) * K1``:

    C_T ~ theta1 * C_b + theta2 * B_j,   0 <= theta1 <= 1,  theta2 >= 0

The constrained weighted least-squares problem is a convex quadratic
over a half-strip, so its minimiser is either the unconstrained solution
(when feasible) or the optimum along one of the edges ``theta1 = 0``,
``theta1 = 1`` or ``theta2 = 0``.  All candidates are evaluated and the
one with the smallest weighted residual wins; across basis curves the
smallest residual wins and ties go to the smallest ``k2``.

Voxels are processed in fixed-size chunks with joblib; a chunk's result
does not depend on which worker ran it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import joblib  # type: ignore
import numpy as np

from kinetics.compartment import BasisSet, KineticParams
from utils.errors import DegenerateInputError, GeometryError
from utils.logging_utils import get_logger
from volume.core import DynamicSeries, TimeActivityCurve, VoiMask, Volume3, extract_voi_tac
from volume.io import store_volume

logger = get_logger(__name__)

BLOOD_VB_THRESHOLD = 0.995
FAILED_RESIDUAL = -1.0
DEFAULT_CHUNK = 512


@dataclass(frozen=True)
class VoxelFit:
    params: KineticParams
    residual: float
    k2_index: int
    blood: bool


@dataclass(frozen=True)
class ParametricImage:
    """K1, k2 and Vb volumes plus the weighted fit residual.

    ``residual`` holds ``-1`` for voxels whose fit failed.
    """

    k1: Volume3
    k2: Volume3
    vb: Volume3
    residual: Volume3
    report: Dict[str, Any] = field(default_factory=dict)

    def display_k1(self) -> Volume3:
        """``K1 * (1 - Vb)``, the blood-suppressed uptake image."""
        return self.k1.with_data(self.k1.data * (1.0 - self.vb.data))


def _check_cb(cb: TimeActivityCurve, basis: BasisSet) -> None:
    if cb.schedule != basis.schedule:
        raise GeometryError('input function and basis use different schedules')
    if not np.any(cb.values != 0):
        raise DegenerateInputError('input function is identically zero')


def _fit_block(ct: np.ndarray, cb: np.ndarray, basis: BasisSet) -> Tuple[np.ndarray, ...]:
    """Fit a ``(V, F)`` block of TACs; returns K1, k2, Vb, residual, k2 index, blood flag."""
    w = basis.weights
    B = basis.curves
    a = float((w * cb * cb).sum())
    b = (w * cb * B).sum(axis=1)
    c = (w * B * B).sum(axis=1)
    p = (ct * (w * cb)).sum(axis=1)
    q = ct @ (w * B).T
    c_safe = np.where(c > 0, c, 1.0)
    det = a * c - b * b

    candidates = []
    with np.errstate(divide='ignore', invalid='ignore'):
        ok = (det > 1e-12 * a * c_safe)[None, :]
        t1 = (p[:, None] * c - b * q) / det
        t2 = (a * q - b * p[:, None]) / det
        feasible = ok & (t1 >= 0) & (t1 <= 1) & (t2 >= 0)
        candidates.append((np.where(feasible, t1, np.nan), np.where(feasible, t2, np.nan)))
    zeros = np.zeros_like(q)
    candidates.append((zeros, np.where(c > 0, np.maximum(q / c_safe, 0.0), 0.0)))
    candidates.append((zeros + 1.0, np.where(c > 0, np.maximum((q - b) / c_safe, 0.0), 0.0)))
    candidates.append((np.broadcast_to(np.clip(p / a, 0.0, 1.0)[:, None], q.shape), zeros))

    best_rss = np.full(q.shape, np.inf)
    best_t1 = np.zeros(q.shape)
    best_t2 = np.zeros(q.shape)
    for t1c, t2c in candidates:
        resid = ct[:, None, :] - t1c[:, :, None] * cb[None, None, :] - t2c[:, :, None] * B[None]
        rss = (resid * resid * w).sum(axis=2)
        better = np.isfinite(rss) & (rss < best_rss)
        best_rss = np.where(better, rss, best_rss)
        best_t1 = np.where(better, t1c, best_t1)
        best_t2 = np.where(better, t2c, best_t2)

    j = np.argmin(best_rss, axis=1)
    rows = np.arange(ct.shape[0])
    vb = best_t1[rows, j]
    theta2 = best_t2[rows, j]
    blood = vb > BLOOD_VB_THRESHOLD
    with np.errstate(divide='ignore', invalid='ignore'):
        k1 = np.where(blood, 0.0, theta2 / (1.0 - vb))
    return k1, np.asarray(basis.k2_grid)[j], vb, best_rss[rows, j], j, blood


def fit_voxel(ct: TimeActivityCurve, cb: TimeActivityCurve, basis: BasisSet) -> VoxelFit:
    """Fit one TAC.

    Raises
    ------
    GeometryError
        If the schedules of ``ct``, ``cb`` and ``basis`` differ.
    DegenerateInputError
        If ``cb`` is identically zero.
    """
    _check_cb(cb, basis)
    if ct.schedule != basis.schedule:
        raise GeometryError('tissue TAC and basis use different schedules')
    k1, k2, vb, rss, j, blood = _fit_block(ct.values[None, :], cb.values, basis)
    params = KineticParams(K1=float(k1[0]), k2=float(k2[0]), Vb=float(vb[0]))
    return VoxelFit(params, float(rss[0]), int(j[0]), bool(blood[0]))


def _fit_chunk(ct: np.ndarray, cb: np.ndarray, basis: BasisSet) -> Tuple[np.ndarray, ...]:
    finite = np.all(np.isfinite(ct), axis=1)
    k1 = np.zeros(ct.shape[0])
    k2 = np.zeros(ct.shape[0])
    vb = np.zeros(ct.shape[0])
    res = np.full(ct.shape[0], FAILED_RESIDUAL)
    blood = np.zeros(ct.shape[0], dtype=bool)
    if finite.any():
        fk1, fk2, fvb, frss, _, fblood = _fit_block(ct[finite], cb, basis)
        good = np.isfinite(fk1) & np.isfinite(frss)
        idx = np.flatnonzero(finite)[good]
        k1[idx], k2[idx], vb[idx] = fk1[good], fk2[good], fvb[good]
        res[idx] = frss[good]
        blood[idx] = fblood[good]
    return k1, k2, vb, res, blood


def fit_parametric(series: DynamicSeries, cb: TimeActivityCurve, basis: BasisSet,
                   mask: Optional[VoiMask] = None, n_jobs: int = 1,
                   chunk_size: int = DEFAULT_CHUNK) -> ParametricImage:
    """Fit every (masked) voxel of ``series``; unmasked voxels are zero-filled.

    Parameters
    ----------
    series : DynamicSeries
        Dynamic frames on the schedule of ``basis``.
    cb : TimeActivityCurve
        Blood input function used to build ``basis``.
    basis : BasisSet
        Precomputed basis curves.
    mask : VoiMask, optional
        Restrict fitting to these voxels.
    n_jobs : int
        joblib workers; results do not depend on this value.
    chunk_size : int
        Voxels per work unit.
    """
    _check_cb(cb, basis)
    if series.schedule != basis.schedule:
        raise GeometryError('series and basis use different schedules')
    if mask is not None and mask.dims != series.dims:
        raise GeometryError(f'mask dims {mask.dims} do not match series dims {series.dims}')
    sel = mask.mask if mask is not None else np.ones(series.dims, dtype=bool)
    tacs = series.as_array()[:, sel].T
    n = tacs.shape[0]
    chunks = [tacs[s:s + chunk_size] for s in range(0, n, max(1, chunk_size))]
    logger.info('fitting %d voxels in %d chunks with %d workers', n, len(chunks), n_jobs)
    results = joblib.Parallel(n_jobs=n_jobs)(
        joblib.delayed(_fit_chunk)(chunk, cb.values, basis) for chunk in chunks
    )
    layers = []
    for i in range(5):
        flat = np.concatenate([r[i] for r in results]) if results else np.zeros(0)
        layers.append(flat)
    k1, k2, vb, res, blood = layers
    failures = int(np.count_nonzero(res == FAILED_RESIDUAL))
    n_blood = int(np.count_nonzero(blood))
    if failures:
        logger.warning('%d voxel fits failed; residual set to %s', failures, FAILED_RESIDUAL)
    if n_blood:
        logger.warning('%d voxels flagged as blood (Vb > %s); K1 reported as 0',
                       n_blood, BLOOD_VB_THRESHOLD)

    def volume(values: np.ndarray) -> Volume3:
        out = np.zeros(series.dims)
        out[sel] = values
        return Volume3(out, series.voxel_size)

    report = {
        'grid': [float(v) for v in basis.k2_grid],
        'weights': [float(v) for v in basis.weights],
        'masked_voxels': n,
        'failures': failures,
        'blood_voxels': n_blood,
    }
    return ParametricImage(volume(k1), volume(k2), volume(vb), volume(res), report)


def fit_region(series: DynamicSeries, cb: TimeActivityCurve, basis: BasisSet,
               mask: VoiMask) -> VoxelFit:
    """Fit the mean TAC of a VOI."""
    return fit_voxel(extract_voi_tac(series, mask), cb, basis)


def store_parametric(img: ParametricImage, out_dir: str) -> Dict[str, str]:
    """Write K1, k2, Vb and residual volumes plus ``fit_report.json`` to ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name in ('k1', 'k2', 'vb', 'residual'):
        path = os.path.join(out_dir, f'{name}.json')
        store_volume(getattr(img, name), path)
        paths[name] = path
    report_path = os.path.join(out_dir, 'fit_report.json')
    with open(report_path, 'w', encoding='utf-8') as f:
        json.dump(img.report, f, indent=2, sort_keys=True)
    paths['report'] = report_path
    return paths


__all__ = [
    'BLOOD_VB_THRESHOLD',
    'FAILED_RESIDUAL',
    'VoxelFit',
    'ParametricImage',
    'fit_voxel',
    'fit_parametric',
    'fit_region',
    'store_parametric',
]
