"""
convolution.py
--------------

Shift-invariant 3-D convolution with three padding policies (``zero``,
``reflect`` and ``edge``, which repeats the outermost voxel) and two
interchangeable backends:

``direct``
    :func:`scipy.ndimage.convolve` in the spatial domain.
``fft``
    :func:`scipy.signal.fftconvolve`; reflect padding is applied with
    :func:`numpy.pad` (``symmetric``, the same half-sample mirror as
    ``ndimage``'s ``reflect``) followed by a ``valid`` convolution.

Both backends agree within ``ConvSpec.tolerance`` (relative).  Results
are independent of thread count within 1e-12; the ``direct`` backend is
bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, List, Sequence

import numpy as np
from scipy import ndimage, signal  # type: ignore

from physics.kernels import RangeKernel
from utils.errors import ConfigError, GeometryError
from volume.core import Volume3

PADDINGS = ('zero', 'reflect', 'edge')
BACKENDS = ('direct', 'fft')


@dataclass(frozen=True)
class ConvSpec:
    padding: str = 'reflect'
    backend: str = 'fft'
    tolerance: float = 1e-5

    def __post_init__(self) -> None:
        if self.padding not in PADDINGS:
            raise ConfigError(f'padding must be one of {PADDINGS}, got {self.padding!r}')
        if self.backend not in BACKENDS:
            raise ConfigError(f'backend must be one of {BACKENDS}, got {self.backend!r}')

    @classmethod
    def from_dict(cls, doc: Dict[str, Any] | None) -> 'ConvSpec':
        doc = doc or {}
        return cls(
            padding=str(doc.get('padding', cls.padding)),
            backend=str(doc.get('backend', cls.backend)),
            tolerance=float(doc.get('tolerance', cls.tolerance)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {'padding': self.padding, 'backend': self.backend, 'tolerance': self.tolerance}


def _is_delta(kernel: np.ndarray) -> bool:
    centre = tuple(d // 2 for d in kernel.shape)
    return bool(kernel[centre] == 1.0 and np.count_nonzero(kernel) == 1)


def convolve_array(arr: np.ndarray, kernel: np.ndarray, padding: str = 'reflect',
                   backend: str = 'fft') -> np.ndarray:
    """Convolve a 3-D array with an odd-sized kernel, output the same shape.

    A unit delta kernel returns an exact copy of ``arr``.

    Raises
    ------
    GeometryError
        If the kernel exceeds the array in any axis or a kernel dim is even.
    """
    a = np.asarray(arr, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    if a.ndim != 3 or k.ndim != 3:
        raise GeometryError(f'expected 3-D arrays, got {a.shape} and {k.shape}')
    if any(d % 2 == 0 for d in k.shape):
        raise GeometryError(f'kernel dims must be odd, got {k.shape}')
    if any(kd > ad for kd, ad in zip(k.shape, a.shape)):
        raise GeometryError(f'kernel {k.shape} larger than volume {a.shape}')
    if padding not in PADDINGS or backend not in BACKENDS:
        raise ConfigError(f'unsupported padding/backend {padding!r}/{backend!r}')
    if _is_delta(k):
        return a.copy()
    if backend == 'direct':
        mode = {'zero': 'constant', 'reflect': 'reflect', 'edge': 'nearest'}[padding]
        return ndimage.convolve(a, k, mode=mode, cval=0.0)
    if padding == 'zero':
        return signal.fftconvolve(a, k, mode='same')
    half = [((d - 1) // 2, (d - 1) // 2) for d in k.shape]
    np_mode = 'symmetric' if padding == 'reflect' else 'edge'
    return signal.fftconvolve(np.pad(a, half, mode=np_mode), k, mode='valid')


def correlate_array(arr: np.ndarray, kernel: np.ndarray, padding: str = 'zero',
                    backend: str = 'fft') -> np.ndarray:
    """Adjoint of :func:`convolve_array` under zero padding: convolution with the flipped kernel."""
    return convolve_array(arr, np.asarray(kernel)[::-1, ::-1, ::-1], padding, backend)


def _edge_fold(arr: np.ndarray, half: Sequence[int]) -> np.ndarray:
    out = arr
    for axis, p in enumerate(half):
        if p == 0:
            continue
        n = out.shape[axis] - 2 * p
        inner = np.take(out, np.arange(p, p + n), axis=axis)
        low = np.take(out, np.arange(p), axis=axis).sum(axis=axis)
        high = np.take(out, np.arange(p + n, n + 2 * p), axis=axis).sum(axis=axis)
        first: List[Any] = [slice(None)] * out.ndim
        last: List[Any] = [slice(None)] * out.ndim
        first[axis], last[axis] = 0, n - 1
        inner[tuple(first)] += low
        inner[tuple(last)] += high
        out = inner
    return out


def convolve_adjoint(arr: np.ndarray, kernel: np.ndarray, padding: str = 'zero',
                     backend: str = 'fft') -> np.ndarray:
    """Exact adjoint of :func:`convolve_array` for ``zero`` and ``edge`` padding.

    Under edge padding the full correlation is folded back onto the
    outermost voxels, undoing the replication of the forward pass.
    """
    if padding == 'zero':
        return correlate_array(arr, kernel, 'zero', backend)
    if padding != 'edge':
        raise ConfigError(f'no exact adjoint for {padding!r} padding')
    a = np.asarray(arr, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    if a.ndim != 3 or k.ndim != 3 or any(d % 2 == 0 for d in k.shape):
        raise GeometryError(f'expected 3-D arrays and an odd kernel, got {a.shape}, {k.shape}')
    if _is_delta(k):
        return a.copy()
    full = signal.fftconvolve(a, k[::-1, ::-1, ::-1], mode='full')
    return _edge_fold(full, [(d - 1) // 2 for d in k.shape])


def convolve3(vol: Volume3, kernel: RangeKernel, spec: ConvSpec | None = None) -> Volume3:
    """Convolve a volume with a range kernel on the same grid.

    Raises
    ------
    GeometryError
        If voxel sizes differ or the kernel is larger than the volume.
    """
    spec = spec or ConvSpec()
    if not np.allclose(vol.voxel_size, kernel.voxel_size, rtol=1e-6, atol=0.0):
        raise GeometryError(
            f'kernel voxel size {kernel.voxel_size} differs from volume {vol.voxel_size}'
        )
    return vol.with_data(convolve_array(vol.data, kernel.data, spec.padding, spec.backend))


__all__ = ['ConvSpec', 'convolve_array', 'correlate_array', 'convolve_adjoint', 'convolve3',
           'PADDINGS', 'BACKENDS']
