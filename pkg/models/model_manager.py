"""
model_manager.py
----------------

Storing, loading and caching model checkpoints.

A checkpoint is a JSON header plus a raw little-endian float32 payload
holding every parameter array in header order (student first, then the
teacher copy when present):

    {"format": "rbpet-checkpoint", "version": 2,
     "arch": {...}, "stage": "denoise", "step": 200, "seed": 0,
     "normalization": "frame_peak", "voxel_size_mm": [2.0, 2.0, 2.0],
     "config": {...},
     "tensors": [{"name": "student/l0.kernel", "shape": [3, 3, 3, 1, 8],
                  "offset": 0, "count": 216}, ...],
     "byte_order": "little", "dtype": "float32",
     "payload": "<name>.params"}

Loaded checkpoints are cached in memory keyed by absolute path.  Call
:func:`reload_checkpoints` to clear the cache; the next
:func:`get_checkpoint` reads the file again.
"""

from __future__ import annotations

import json
import os
from typing import Any, Dict, List, Mapping, Optional

import numpy as np

from models.networks import Architecture, Params
from models.training import NORMALIZATION, ModelState
from utils.errors import VolumeFormatError
from utils.logging_utils import get_logger

logger = get_logger(__name__)

CHECKPOINT_FORMAT = 'rbpet-checkpoint'
CHECKPOINT_VERSION = 2
PAYLOAD_DTYPE = np.dtype('<f4')

_checkpoint_cache: Dict[str, ModelState] = {}


def _payload_path(header_path: str) -> str:
    root, _ = os.path.splitext(header_path)
    return root + '.params'


def _tensors(state: ModelState) -> List[tuple]:
    out = [(f'student/{k}', v) for k, v in state.student.items()]
    if state.teacher is not None:
        out += [(f'teacher/{k}', v) for k, v in state.teacher.items()]
    return out


def store_checkpoint(state: ModelState, path: str,
                     config: Optional[Mapping[str, Any]] = None) -> None:
    """Write ``state`` to ``path`` (header) and a sibling ``.params`` payload.

    Parameters are rounded to float32 on disk.
    """
    payload_path = _payload_path(path)
    entries = []
    offset = 0
    chunks = []
    for name, value in _tensors(state):
        arr = np.asarray(value, dtype=np.float64)
        entries.append({'name': name, 'shape': list(arr.shape), 'offset': offset,
                        'count': int(arr.size)})
        offset += int(arr.size)
        chunks.append(arr.ravel().astype(PAYLOAD_DTYPE))
    header = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'arch': state.arch.to_dict(),
        'stage': state.stage,
        'step': int(state.step),
        'seed': int(state.seed),
        'normalization': NORMALIZATION,
        'voxel_size_mm': None if state.voxel_size is None else [float(v) for v in state.voxel_size],
        'config': dict(config or {}),
        'tensors': entries,
        'byte_order': 'little',
        'dtype': 'float32',
        'payload': os.path.basename(payload_path),
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(payload_path, 'wb') as f:
        for chunk in chunks:
            f.write(chunk.tobytes())
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(header, f, indent=2, sort_keys=True)
    _checkpoint_cache.pop(os.path.abspath(path), None)
    logger.info('Stored %s checkpoint at step %d to %s', state.stage, state.step, path)


def load_checkpoint(path: str) -> ModelState:
    """Read a checkpoint written by :func:`store_checkpoint` (no caching).

    Raises
    ------
    VolumeFormatError
        If the header is malformed or the payload length disagrees with it.
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            header = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f'cannot read checkpoint header {path}: {exc}') from exc
    if not isinstance(header, dict) or header.get('format') != CHECKPOINT_FORMAT:
        raise VolumeFormatError(f'{path}: not an rbpet checkpoint')
    if header.get('normalization') != NORMALIZATION:
        raise VolumeFormatError(
            f'{path}: checkpoint normalisation {header.get("normalization")!r} is not supported'
        )
    payload_path = os.path.join(os.path.dirname(os.path.abspath(path)),
                                header.get('payload') or os.path.basename(_payload_path(path)))
    try:
        raw = np.fromfile(payload_path, dtype=PAYLOAD_DTYPE).astype(np.float64)
    except OSError as exc:
        raise VolumeFormatError(f'cannot read checkpoint payload {payload_path}: {exc}') from exc
    entries = header.get('tensors', [])
    expected = sum(int(e['count']) for e in entries)
    if raw.size != expected:
        raise VolumeFormatError(f'{payload_path}: {raw.size} values, header needs {expected}')
    student: Params = {}
    teacher: Params = {}
    for e in entries:
        role, name = e['name'].split('/', 1)
        arr = raw[e['offset']:e['offset'] + e['count']].reshape(e['shape'])
        (student if role == 'student' else teacher)[name] = arr
    voxel = header.get('voxel_size_mm')
    try:
        return ModelState(
            arch=Architecture.from_dict(header['arch']),
            student=student,
            teacher=teacher or None,
            step=int(header.get('step', 0)),
            seed=int(header.get('seed', 0)),
            stage=str(header.get('stage', 'denoise')),
            voxel_size=None if voxel is None else tuple(voxel),  # type: ignore[arg-type]
        )
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f'{path}: {exc}') from exc


def get_checkpoint(path: str) -> ModelState:
    """Load a checkpoint, returning the cached copy when available."""
    key = os.path.abspath(path)
    if key in _checkpoint_cache:
        return _checkpoint_cache[key]
    state = load_checkpoint(path)
    _checkpoint_cache[key] = state
    logger.info('Loaded %s checkpoint from %s', state.stage, path)
    return state


def reload_checkpoints() -> None:
    """Clear the checkpoint cache forcing checkpoints to be re-read on next access."""
    _checkpoint_cache.clear()
    logger.info('Cleared checkpoint cache')


__all__ = [
    'store_checkpoint',
    'load_checkpoint',
    'get_checkpoint',
    'reload_checkpoints',
]
