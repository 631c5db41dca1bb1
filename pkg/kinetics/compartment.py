"""
compartment.py
--------------

One-tissue compartment model with blood-volume spillover:

    C_T(t) = Vb * C_b(t) + (1 - Vb) * K1 * (exp(-k2 t) (x) C_b)(t)

``C_b`` is only known as frame averages, so it is treated as piecewise
constant over each frame (and zero before the first frame and in gaps
between frames).  The convolution is evaluated on an internal grid of
sub-steps no longer than 0.5 s, using the exact solution of
``dI/dt = C_b - k2 I`` for a constant input over each sub-step, and the
result is averaged back over every frame.

Rates are per minute; frame schedules are in seconds and are converted
here.

Example:

    basis = build_basis(cb, default_k2_grid())
    ct = tac_model(KineticParams(K1=0.6, k2=0.2, Vb=0.3), cb)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from utils.errors import DegenerateInputError, GeometryError
from volume.core import FrameSchedule, TimeActivityCurve

FINE_STEP_S = 0.5
K2_GRID_MIN = 0.01
K2_GRID_MAX = 6.0
K2_GRID_POINTS = 100


@dataclass(frozen=True)
class KineticParams:
    """``K1`` in ml/min/g, ``k2`` in 1/min and the fractional blood volume ``Vb``."""

    K1: float
    k2: float
    Vb: float

    def __post_init__(self) -> None:
        if not (self.K1 >= 0 and self.k2 >= 0 and 0.0 <= self.Vb <= 1.0):
            raise ValueError(
                f'need K1 >= 0, k2 >= 0 and 0 <= Vb <= 1, got {self.K1}, {self.k2}, {self.Vb}'
            )


def default_k2_grid() -> np.ndarray:
    return np.geomspace(K2_GRID_MIN, K2_GRID_MAX, K2_GRID_POINTS)


def _substeps(schedule: FrameSchedule) -> Tuple[np.ndarray, np.ndarray]:
    """Sub-step durations (s) and owning frame index (-1 for gaps)."""
    durations: List[np.ndarray] = []
    owners: List[np.ndarray] = []
    cursor = 0.0
    for f, (start, end) in enumerate(schedule.frames):
        for lo, hi, owner in ((cursor, start, -1), (start, end, f)):
            length = hi - lo
            if length <= 0:
                continue
            n = int(np.ceil(length / FINE_STEP_S - 1e-9))
            durations.append(np.full(n, length / n))
            owners.append(np.full(n, owner))
        cursor = end
    dt = np.concatenate(durations)
    return dt, np.concatenate(owners).astype(int)


def _phi1(x: np.ndarray) -> np.ndarray:
    """``(1 - exp(-x)) / x`` with the limit 1 at 0."""
    out = np.ones_like(x)
    nz = x > 0
    out[nz] = -np.expm1(-x[nz]) / x[nz]
    return out


def _phi2(x: np.ndarray) -> np.ndarray:
    """``(x - 1 + exp(-x)) / x**2`` with a series near 0 (limit 1/2)."""
    out = np.empty_like(x)
    small = x < 1e-3
    xs = x[small]
    out[small] = 0.5 - xs / 6.0 + xs ** 2 / 24.0 - xs ** 3 / 120.0
    xl = x[~small]
    out[~small] = (xl + np.expm1(-xl)) / xl ** 2
    return out


def response_curves(cb: TimeActivityCurve, k2: Sequence[float] | np.ndarray) -> np.ndarray:
    """Frame averages of ``exp(-k2 t) (x) C_b`` for every ``k2``; shape ``(J, F)``.

    The result is in the units of ``C_b`` times minutes, so multiplying by
    ``K1`` (ml/min/g) gives a concentration.
    """
    rates = np.atleast_1d(np.asarray(k2, dtype=np.float64))
    if np.any(rates < 0):
        raise ValueError('k2 values must be nonnegative')
    schedule = cb.schedule
    dt_s, owner = _substeps(schedule)
    dt = dt_s / 60.0
    c = np.where(owner >= 0, cb.values[np.maximum(owner, 0)], 0.0)
    x = rates[:, None] * dt[None, :]
    decay = np.exp(-x)
    p1 = _phi1(x)
    gain = c[None, :] * dt[None, :] * p1
    mean_gain = c[None, :] * dt[None, :] * _phi2(x)
    n_frames = len(schedule)
    acc = np.zeros((rates.size, n_frames))
    state = np.zeros(rates.size)
    for n in range(dt.size):
        if owner[n] >= 0:
            acc[:, owner[n]] += (state * p1[:, n] + mean_gain[:, n]) * dt_s[n]
        state = state * decay[:, n] + gain[:, n]
    return acc / schedule.durations[None, :]


def tac_model(params: KineticParams, cb: TimeActivityCurve) -> TimeActivityCurve:
    """Tissue TAC of the one-tissue model, frame-averaged on ``cb``'s schedule."""
    conv = response_curves(cb, [params.k2])[0]
    values = params.Vb * cb.values + (1.0 - params.Vb) * params.K1 * conv
    return TimeActivityCurve(cb.schedule, values)


@dataclass(frozen=True)
class BasisSet:
    """Precomputed basis curves ``B_j`` for a grid of ``k2`` values.

    ``weights`` are proportional to frame duration and sum to 1.
    """

    k2_grid: np.ndarray
    curves: np.ndarray
    weights: np.ndarray
    schedule: FrameSchedule
    cb: TimeActivityCurve

    def __post_init__(self) -> None:
        grid = np.asarray(self.k2_grid, dtype=np.float64)
        if grid.ndim != 1 or grid.size == 0:
            raise ValueError('k2 grid must be a non-empty 1-D array')
        if np.any(np.diff(grid) <= 0):
            raise ValueError('k2 grid must be strictly increasing')
        if self.curves.shape != (grid.size, len(self.schedule)):
            raise GeometryError(f'basis shape {self.curves.shape} does not match grid/schedule')

    @property
    def size(self) -> int:
        return int(np.asarray(self.k2_grid).size)


def frame_weights(schedule: FrameSchedule) -> np.ndarray:
    w = schedule.durations.astype(np.float64)
    return w / w.sum()


def build_basis(cb: TimeActivityCurve, k2_grid: Sequence[float] | np.ndarray | None = None,
                schedule: FrameSchedule | None = None) -> BasisSet:
    """Precompute basis curves for basis-function fitting.

    Raises
    ------
    ValueError
        If the grid is empty, not strictly increasing or negative.
    GeometryError
        If ``schedule`` is given and differs from the schedule of ``cb``.
    DegenerateInputError
        If ``cb`` is identically zero.
    """
    if schedule is not None and schedule != cb.schedule:
        raise GeometryError('basis schedule differs from the input-function schedule')
    grid = default_k2_grid() if k2_grid is None else np.asarray(k2_grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError('k2 grid is empty')
    if not np.any(cb.values != 0):
        raise DegenerateInputError('input function is identically zero')
    curves = response_curves(cb, grid)
    return BasisSet(grid, curves, frame_weights(cb.schedule), cb.schedule, cb)


__all__ = [
    'FINE_STEP_S',
    'KineticParams',
    'BasisSet',
    'default_k2_grid',
    'frame_weights',
    'response_curves',
    'tac_model',
    'build_basis',
]
