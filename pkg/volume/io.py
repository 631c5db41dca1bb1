"""
io.py
-----

File formats for volumes, dynamic series and time-activity curves.

A volume (or a whole series) is a JSON header plus a raw payload file:

    {"dims": [nx, ny, nz], "voxel_size_mm": [dx, dy, dz],
     "frame_schedule_s": [[0, 3], ...],        # series only
     "units": "Bq/ml", "byte_order": "little", "dtype": "float32",
     "payload": "<name>.raw"}

The payload holds little-endian float32 values, x-fastest, one frame
after another.  Values are widened to float64 on load, so a store/load
round trip is bit-exact only for float32-representable volumes.  Any
other float64 volume comes back rounded to float32, a relative change of
up to about 6e-8 per voxel, so fits and metrics computed from reloaded
series can differ slightly from the same computation in memory.

TACs and AIFs are CSV files with the header
``time_start_s,time_end_s,value_bq_ml``.
"""

from __future__ import annotations

import csv
import json
import os
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from utils.errors import GeometryError, VolumeFormatError
from utils.logging_utils import get_logger
from volume.core import DynamicSeries, FrameSchedule, TimeActivityCurve, Volume3

logger = get_logger(__name__)

PAYLOAD_DTYPE = np.dtype('<f4')
TAC_COLUMNS = ['time_start_s', 'time_end_s', 'value_bq_ml']


def _payload_path(header_path: str) -> str:
    root, _ = os.path.splitext(header_path)
    return root + '.raw'


def _write(header_path: str, dims: Tuple[int, ...], voxel_size: Tuple[float, ...],
           frames: List[np.ndarray], schedule: Optional[FrameSchedule]) -> None:
    payload_path = _payload_path(header_path)
    header: Dict[str, Any] = {
        'dims': [int(d) for d in dims],
        'voxel_size_mm': [float(v) for v in voxel_size],
        'units': 'Bq/ml',
        'byte_order': 'little',
        'dtype': 'float32',
        'payload': os.path.basename(payload_path),
    }
    if schedule is not None:
        header['frame_schedule_s'] = schedule.to_list()
    directory = os.path.dirname(os.path.abspath(header_path))
    os.makedirs(directory, exist_ok=True)
    with open(payload_path, 'wb') as f:
        for frame in frames:
            f.write(np.ravel(frame, order='F').astype(PAYLOAD_DTYPE).tobytes())
    with open(header_path, 'w', encoding='utf-8') as f:
        json.dump(header, f, indent=2)


def _read(header_path: str) -> Tuple[Dict[str, Any], np.ndarray]:
    try:
        with open(header_path, 'r', encoding='utf-8') as f:
            header = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f'cannot read volume header {header_path}: {exc}') from exc
    if not isinstance(header, dict):
        raise VolumeFormatError(f'{header_path}: header is not a JSON object')
    dims = header.get('dims')
    if not isinstance(dims, list) or len(dims) != 3 or any(
        not isinstance(d, int) or d <= 0 for d in dims
    ):
        raise VolumeFormatError(f'{header_path}: dims must be three positive integers, got {dims}')
    spacing = header.get('voxel_size_mm')
    if not isinstance(spacing, list) or len(spacing) != 3:
        raise VolumeFormatError(f'{header_path}: voxel_size_mm must hold three values')
    if header.get('byte_order', 'little') != 'little':
        raise VolumeFormatError(f'{header_path}: only little-endian payloads are supported')
    payload_name = header.get('payload') or os.path.basename(_payload_path(header_path))
    payload_path = os.path.join(os.path.dirname(os.path.abspath(header_path)), payload_name)
    try:
        raw = np.fromfile(payload_path, dtype=PAYLOAD_DTYPE)
    except OSError as exc:
        raise VolumeFormatError(f'cannot read payload {payload_path}: {exc}') from exc
    values = raw.astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise VolumeFormatError(f'{payload_path}: payload contains non-finite values')
    return header, values


def store_volume(vol: Volume3, path: str) -> None:
    """Write ``vol`` as a header at ``path`` plus a sibling ``.raw`` payload."""
    _write(path, vol.dims, vol.voxel_size, [vol.data], None)


def load_volume(path: str) -> Volume3:
    """Read a single volume written by :func:`store_volume`.

    Raises
    ------
    VolumeFormatError
        On a malformed header, a payload whose length does not match the
        header, or non-finite payload values.
    """
    header, values = _read(path)
    dims = tuple(header['dims'])
    expected = int(np.prod(dims))
    if values.size != expected:
        raise VolumeFormatError(
            f'{path}: payload holds {values.size} values, header dims {dims} need {expected}'
        )
    data = values.reshape(dims, order='F')
    try:
        return Volume3(data, tuple(header['voxel_size_mm']))  # type: ignore[arg-type]
    except GeometryError as exc:
        raise VolumeFormatError(f'{path}: {exc}') from exc


def store_series(series: DynamicSeries, path: str) -> None:
    """Write a dynamic series as one header with ``frame_schedule_s`` and one payload."""
    _write(path, series.dims, series.voxel_size, [v.data for v in series.volumes], series.schedule)
    logger.debug('Stored %d-frame series at %s', len(series), path)


def load_series(path: str) -> DynamicSeries:
    """Read a dynamic series written by :func:`store_series`."""
    header, values = _read(path)
    frames_s = header.get('frame_schedule_s')
    if not isinstance(frames_s, list) or not frames_s:
        raise VolumeFormatError(f'{path}: series header needs a frame_schedule_s list')
    try:
        schedule = FrameSchedule(tuple((float(s), float(e)) for s, e in frames_s))
    except (GeometryError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f'{path}: bad frame schedule: {exc}') from exc
    dims = tuple(header['dims'])
    per_frame = int(np.prod(dims))
    if values.size != per_frame * len(schedule):
        raise VolumeFormatError(
            f'{path}: payload holds {values.size} values, expected {per_frame} x {len(schedule)}'
        )
    frames = [
        values[i * per_frame:(i + 1) * per_frame].reshape(dims, order='F')
        for i in range(len(schedule))
    ]
    return DynamicSeries.from_array(np.stack(frames), header['voxel_size_mm'], schedule)


def write_tac_csv(tac: TimeActivityCurve, path: str) -> None:
    """Write a TAC as CSV; floats use ``repr`` so the round trip is exact."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(TAC_COLUMNS)
        for (start, end), value in zip(tac.schedule.frames, tac.values):
            writer.writerow([repr(float(start)), repr(float(end)), repr(float(value))])


def read_tac_csv(path: str) -> TimeActivityCurve:
    """Read a TAC CSV written by :func:`write_tac_csv` (header row required)."""
    with open(path, 'r', newline='', encoding='utf-8') as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in TAC_COLUMNS):
            raise VolumeFormatError(f'{path}: expected columns {TAC_COLUMNS}')
        rows = list(reader)
    if not rows:
        raise VolumeFormatError(f'{path}: TAC has no rows')
    try:
        frames = tuple((float(r['time_start_s']), float(r['time_end_s'])) for r in rows)
        values = np.array([float(r['value_bq_ml']) for r in rows])
        return TimeActivityCurve(FrameSchedule(frames), values)
    except (GeometryError, ValueError) as exc:
        raise VolumeFormatError(f'{path}: {exc}') from exc


def write_dense_csv(times: np.ndarray, values: np.ndarray, path: str) -> None:
    """Write a densely sampled curve (e.g. an arterial input function) as ``time_s,value_bq_ml``."""
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['time_s', 'value_bq_ml'])
        for t, v in zip(times, values):
            writer.writerow([repr(float(t)), repr(float(v))])


def read_dense_csv(path: str) -> Tuple[np.ndarray, np.ndarray]:
    with open(path, 'r', newline='', encoding='utf-8') as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise VolumeFormatError(f'{path}: curve has no rows')
    try:
        times = np.array([float(r['time_s']) for r in rows])
        values = np.array([float(r['value_bq_ml']) for r in rows])
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f'{path}: expected columns time_s,value_bq_ml') from exc
    return times, values


__all__ = [
    'store_volume',
    'load_volume',
    'store_series',
    'load_series',
    'write_tac_csv',
    'read_tac_csv',
    'write_dense_csv',
    'read_dense_csv',
]
