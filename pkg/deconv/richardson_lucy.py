"""
richardson_lucy.py
------------------

Richardson-Lucy deconvolution, the non-learned positron range correction
baseline.  The estimate starts from the (clamped) blurred image and is
updated multiplicatively:

    u <- u * H^T( d / H u )

with reflect padding so edges are not dimmed.  Ratios with a zero
numerator are defined as 0, so voxels with no measured activity stay
empty.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional

import numpy as np

from deconv.convolution import ConvSpec, convolve_array
from physics.kernels import RangeKernel
from utils.errors import GeometryError, NumericalError
from utils.logging_utils import get_logger
from volume.core import Volume3

logger = get_logger(__name__)


@dataclass(frozen=True)
class RLOptions:
    eps: float = 1e-12
    spec: ConvSpec = ConvSpec(padding='reflect', backend='fft')
    log_every: int = 10

    @classmethod
    def from_dict(cls, doc: Dict[str, Any] | None) -> 'RLOptions':
        doc = doc or {}
        return cls(
            eps=float(doc.get('eps', 1e-12)),
            spec=ConvSpec.from_dict(doc.get('conv', {'padding': 'reflect', 'backend': 'fft'})),
            log_every=int(doc.get('log_every', 10)),
        )


def poisson_log_likelihood(data: np.ndarray, reblurred: np.ndarray, eps: float = 1e-12) -> float:
    """``sum(d log(Hu) - Hu)`` with ``0 log 0 = 0``."""
    hu = np.maximum(reblurred, eps)
    term = np.where(data > 0, data * np.log(hu), 0.0)
    return float((term - reblurred).sum())


def richardson_lucy(blurred: Volume3, kernel: RangeKernel, iters: int,
                    opts: RLOptions | None = None,
                    callback: Optional[Callable[[int, np.ndarray], None]] = None) -> Volume3:
    """Deconvolve ``blurred`` by ``kernel`` with ``iters`` RL updates.

    An all-zero input returns zeros.  ``callback(iteration, estimate)``
    is invoked after every update.

    Raises
    ------
    GeometryError
        If ``iters < 1`` or the grids differ.
    NumericalError
        If an intermediate becomes non-finite; the message names the iteration.
    """
    opts = opts or RLOptions()
    if iters < 1:
        raise GeometryError(f'iters must be >= 1, got {iters}')
    if not np.allclose(blurred.voxel_size, kernel.voxel_size, rtol=1e-6, atol=0.0):
        raise GeometryError('kernel and image voxel sizes differ')
    d = np.maximum(blurred.data, 0.0)
    if not d.any():
        return blurred.with_data(np.zeros_like(d))
    k = kernel.data
    k_adj = k[::-1, ::-1, ::-1]
    pad, backend = opts.spec.padding, opts.spec.backend
    u = d.copy()
    for it in range(1, iters + 1):
        hu = convolve_array(u, k, pad, backend)
        ratio = np.zeros_like(d)
        np.divide(d, np.maximum(hu, opts.eps), out=ratio, where=d > 0)
        u = u * convolve_array(ratio, k_adj, pad, backend)
        if not np.all(np.isfinite(u)):
            raise NumericalError('non-finite Richardson-Lucy estimate', where=f'iteration {it}')
        np.maximum(u, 0.0, out=u)
        if callback is not None:
            callback(it, u)
        if it % opts.log_every == 0:
            logger.debug('RL iteration %d/%d', it, iters)
    return blurred.with_data(u)


__all__ = ['RLOptions', 'poisson_log_likelihood', 'richardson_lucy']
