"""
core.py
-------

Data model for reconstructed PET data: 3-D volumes, frame schedules,
dynamic series, VOI masks and time-activity curves, plus the two
extraction rules every downstream stage depends on (VOI means and AIF
frame averaging).

All containers are immutable after construction.  Arrays are stored as
read-only float64 copies indexed ``[x, y, z]``; on disk they are written
x-fastest (see :mod:`volume.io`).  Times are seconds throughout; the
kinetics package converts to minutes at its own boundary.

Example:

    schedule = FrameSchedule.rb82_default()
    series = DynamicSeries.from_array(frames, (2.0, 2.0, 2.0), schedule)
    tac = extract_voi_tac(series, mask)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from utils.errors import DegenerateInputError, GeometryError

Dims = Tuple[int, int, int]
Spacing = Tuple[float, float, float]


def _frozen_copy(values: np.ndarray, dtype: type = np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Volume3:
    """A 3-D activity volume in Bq/ml on a regular grid.

    Parameters
    ----------
    data : array_like
        Values indexed ``[x, y, z]``.  Converted to a read-only float64 copy.
    voxel_size : tuple of float
        Voxel spacing ``(dx, dy, dz)`` in millimetres.
    """

    data: np.ndarray
    voxel_size: Spacing

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise GeometryError(f'volume data must be 3-D, got shape {arr.shape}')
        if min(arr.shape) <= 0:
            raise GeometryError(f'volume dims must be positive, got {arr.shape}')
        spacing = tuple(float(v) for v in self.voxel_size)
        if len(spacing) != 3 or any(not np.isfinite(v) or v <= 0 for v in spacing):
            raise GeometryError(f'voxel size must be three positive values, got {self.voxel_size}')
        if not np.all(np.isfinite(arr)):
            raise GeometryError('volume contains non-finite values')
        object.__setattr__(self, 'data', _frozen_copy(arr))
        object.__setattr__(self, 'voxel_size', spacing)

    @property
    def dims(self) -> Dims:
        nx, ny, nz = self.data.shape
        return (nx, ny, nz)

    @property
    def n_voxels(self) -> int:
        return int(self.data.size)

    def same_geometry(self, other: 'Volume3', rtol: float = 1e-6) -> bool:
        """True when dims agree and voxel sizes agree within ``rtol``."""
        return self.dims == other.dims and bool(
            np.allclose(self.voxel_size, other.voxel_size, rtol=rtol, atol=0.0)
        )

    def with_data(self, data: np.ndarray) -> 'Volume3':
        """Return a new volume with the same geometry and new values."""
        return Volume3(data, self.voxel_size)

    def clamped(self) -> 'Volume3':
        """Return a copy with negative values set to zero."""
        return self.with_data(np.maximum(self.data, 0.0))

    @classmethod
    def zeros(cls, dims: Sequence[int], voxel_size: Sequence[float]) -> 'Volume3':
        shape = tuple(int(d) for d in dims)
        return cls(np.zeros(shape), tuple(voxel_size))  # type: ignore[arg-type]


@dataclass(frozen=True)
class FrameSchedule:
    """Ordered, non-overlapping frame intervals ``(start_s, end_s)``."""

    frames: Tuple[Tuple[float, float], ...]

    def __post_init__(self) -> None:
        frames = tuple((float(s), float(e)) for s, e in self.frames)
        if not frames:
            raise GeometryError('frame schedule must contain at least one frame')
        prev_end = -np.inf
        for i, (start, end) in enumerate(frames):
            if not (np.isfinite(start) and np.isfinite(end)):
                raise GeometryError(f'frame {i} has non-finite bounds')
            if end <= start:
                raise GeometryError(f'frame {i} has non-positive duration ({start}, {end})')
            if start < prev_end:
                raise GeometryError(f'frame {i} starts at {start} before previous end {prev_end}')
            prev_end = end
        object.__setattr__(self, 'frames', frames)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def starts(self) -> np.ndarray:
        return np.array([s for s, _ in self.frames])

    @property
    def ends(self) -> np.ndarray:
        return np.array([e for _, e in self.frames])

    @property
    def durations(self) -> np.ndarray:
        return self.ends - self.starts

    @property
    def mids(self) -> np.ndarray:
        return 0.5 * (self.starts + self.ends)

    def to_list(self) -> List[List[float]]:
        return [[s, e] for s, e in self.frames]

    @classmethod
    def from_durations(cls, blocks: Iterable[Tuple[int, float]],
                       start_s: float = 0.0) -> 'FrameSchedule':
        """Build a contiguous schedule from ``(count, duration_s)`` blocks."""
        frames = []
        t = float(start_s)
        for count, duration in blocks:
            for _ in range(int(count)):
                frames.append((t, t + float(duration)))
                t += float(duration)
        return cls(tuple(frames))

    @classmethod
    def rb82_default(cls) -> 'FrameSchedule':
        """The 6-minute Rb-82 protocol: 20x3 s, 6x10 s, 12x20 s."""
        return cls.from_durations([(20, 3.0), (6, 10.0), (12, 20.0)])


@dataclass(frozen=True)
class DynamicSeries:
    """One :class:`Volume3` per frame of a :class:`FrameSchedule`."""

    schedule: FrameSchedule
    volumes: Tuple[Volume3, ...]

    def __post_init__(self) -> None:
        vols = tuple(self.volumes)
        if len(vols) != len(self.schedule):
            raise GeometryError(
                f'series has {len(vols)} volumes for {len(self.schedule)} frames'
            )
        for i, vol in enumerate(vols[1:], start=1):
            if not vol.same_geometry(vols[0]):
                raise GeometryError(f'frame {i} geometry differs from frame 0')
        object.__setattr__(self, 'volumes', vols)

    def __len__(self) -> int:
        return len(self.volumes)

    @property
    def dims(self) -> Dims:
        return self.volumes[0].dims

    @property
    def voxel_size(self) -> Spacing:
        return self.volumes[0].voxel_size

    def as_array(self) -> np.ndarray:
        """Stack frames into a ``(n_frames, nx, ny, nz)`` array."""
        return np.stack([v.data for v in self.volumes], axis=0)

    def with_frames(self, frames: Sequence[np.ndarray]) -> 'DynamicSeries':
        """Return a series on the same schedule and grid with new frame data."""
        return DynamicSeries(self.schedule, tuple(Volume3(f, self.voxel_size) for f in frames))

    @classmethod
    def from_array(
        cls, frames: np.ndarray, voxel_size: Sequence[float], schedule: FrameSchedule
    ) -> 'DynamicSeries':
        arr = np.asarray(frames)
        if arr.ndim != 4:
            raise GeometryError(f'expected a 4-D frame array, got shape {arr.shape}')
        spacing = tuple(float(v) for v in voxel_size)
        return cls(schedule, tuple(Volume3(f, spacing) for f in arr))  # type: ignore[arg-type]


@dataclass(frozen=True)
class VoiMask:
    """Boolean volume-of-interest on a fixed grid."""

    mask: np.ndarray
    label: str

    def __post_init__(self) -> None:
        arr = np.asarray(self.mask, dtype=bool)
        if arr.ndim != 3:
            raise GeometryError(f'mask must be 3-D, got shape {arr.shape}')
        if not arr.any():
            raise DegenerateInputError(f'mask {self.label!r} selects no voxels')
        object.__setattr__(self, 'mask', _frozen_copy(arr, dtype=bool))

    @property
    def dims(self) -> Dims:
        nx, ny, nz = self.mask.shape
        return (nx, ny, nz)

    @property
    def count(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class TimeActivityCurve:
    """Per-frame concentrations in Bq/ml.

    Values may be negative (noisy reconstructions); operations that need
    nonnegative input call :meth:`clamped` themselves.
    """

    schedule: FrameSchedule
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if vals.size != len(self.schedule):
            raise GeometryError(f'{vals.size} TAC values for {len(self.schedule)} frames')
        if not np.all(np.isfinite(vals)):
            raise GeometryError('TAC contains non-finite values')
        object.__setattr__(self, 'values', _frozen_copy(vals))

    def __len__(self) -> int:
        return int(self.values.size)

    def clamped(self) -> 'TimeActivityCurve':
        return TimeActivityCurve(self.schedule, np.maximum(self.values, 0.0))

    def scaled(self, factor: float) -> 'TimeActivityCurve':
        return TimeActivityCurve(self.schedule, self.values * float(factor))


def extract_voi_tac(series: DynamicSeries, mask: VoiMask) -> TimeActivityCurve:
    """Unweighted mean of the masked voxels in every frame.

    Raises
    ------
    GeometryError
        If the mask grid differs from the series grid.
    DegenerateInputError
        If the mask is empty.
    """
    if mask.dims != series.dims:
        raise GeometryError(f'mask dims {mask.dims} do not match series dims {series.dims}')
    sel = mask.mask
    n = int(sel.sum())
    if n == 0:
        raise DegenerateInputError(f'mask {mask.label!r} selects no voxels')
    values = np.array([vol.data[sel].sum() / n for vol in series.volumes])
    return TimeActivityCurve(series.schedule, values)


def resample_aif_to_frames(
    aif_times: Sequence[float], aif_values: Sequence[float], schedule: FrameSchedule
) -> TimeActivityCurve:
    """Average densely sampled AIF values falling in each ``[start_s, end_s)``.

    Raises
    ------
    GeometryError
        If the sample times are not strictly increasing or lengths differ.
    DegenerateInputError
        If a frame contains no sample.
    """
    times = np.asarray(aif_times, dtype=np.float64).reshape(-1)
    values = np.asarray(aif_values, dtype=np.float64).reshape(-1)
    if times.size != values.size or times.size == 0:
        raise GeometryError('AIF times and values must be non-empty and of equal length')
    if np.any(np.diff(times) <= 0):
        raise GeometryError('AIF sample times must be strictly increasing')
    lo = np.searchsorted(times, schedule.starts, side='left')
    hi = np.searchsorted(times, schedule.ends, side='left')
    counts = hi - lo
    if np.any(counts == 0):
        missing = int(np.flatnonzero(counts == 0)[0])
        raise DegenerateInputError(f'frame {missing} {schedule.frames[missing]} has no AIF samples')
    # Per-frame sums by direct slicing keep the mean of a constant signal exact.
    means = np.array([values[a:b].sum() / (b - a) for a, b in zip(lo, hi)])
    return TimeActivityCurve(schedule, means)


def static_frame(series: DynamicSeries, start_s: float = 120.0, end_s: float = 360.0) -> Volume3:
    """Duration-weighted mean of the frames overlapping ``[start_s, end_s]``."""
    if end_s <= start_s:
        raise GeometryError(f'static window must have positive length, got [{start_s}, {end_s}]')
    sched = series.schedule
    overlap = np.clip(np.minimum(sched.ends, end_s) - np.maximum(sched.starts, start_s), 0.0, None)
    total = overlap.sum()
    if total <= 0:
        raise DegenerateInputError(f'no frame overlaps the static window [{start_s}, {end_s}]')
    acc = np.zeros(series.dims)
    for w, vol in zip(overlap, series.volumes):
        if w > 0:
            acc += w * vol.data
    return Volume3(acc / total, series.voxel_size)


__all__ = [
    'Volume3',
    'FrameSchedule',
    'DynamicSeries',
    'VoiMask',
    'TimeActivityCurve',
    'extract_voi_tac',
    'resample_aif_to_frames',
    'static_frame',
]
