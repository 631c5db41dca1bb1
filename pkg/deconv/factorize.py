"""
factorize.py
------------

Fit the extra blur ``K`` that carries a narrow kernel into a broad one,
``h_small (x) K ~= h_big``, by projected subgradient descent on the mean
absolute error.  Every iterate is projected onto the probability simplex
(nonnegative, unit sum), so the result is always a valid
:class:`~physics.kernels.RangeKernel` on the common grid.

The descent starts from the better of two candidates: ``h_big`` itself
and a Gaussian whose per-axis variance is the variance difference of
the two inputs.  The best iterate seen is returned.

Example:

    result = factorize_kernel(h_f18, h_rb82)
    h_f2rb = result.kernel
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict

import numpy as np

from deconv.convolution import convolve_array, correlate_array
from physics.kernels import RangeKernel, gaussian_kernel, kernel_moments
from utils.errors import ConvergenceError, GeometryError, NumericalError
from utils.logging_utils import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class FactorizeOptions:
    learning_rate: float = 1e-2
    max_iter: int = 5000
    tol: float = 1e-9
    patience: int = 100
    mae_threshold: float = 1e-3
    log_every: int = 500

    @classmethod
    def from_dict(cls, doc: Dict[str, Any] | None) -> 'FactorizeOptions':
        doc = doc or {}
        defaults = cls()
        return cls(**{k: type(getattr(defaults, k))(doc.get(k, getattr(defaults, k)))
                      for k in defaults.__dataclass_fields__})

    def to_dict(self) -> Dict[str, Any]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class FactorizationResult:
    kernel: RangeKernel
    mae: float
    iterations: int
    start: str


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of a flattened vector onto ``{x >= 0, sum x = 1}``."""
    flat = np.asarray(v, dtype=np.float64).reshape(-1)
    u = np.sort(flat)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, u.size + 1)
    rho = int(np.nonzero(u - css / idx > 0)[0][-1])
    theta = css[rho] / (rho + 1)
    return np.maximum(flat - theta, 0.0).reshape(np.shape(v))


def _mae(h_small: np.ndarray, k: np.ndarray, h_big: np.ndarray) -> float:
    return float(np.abs(convolve_array(k, h_small, 'zero') - h_big).mean())


def _moment_matched_start(h_small: RangeKernel, h_big: RangeKernel) -> np.ndarray:
    _, var_small = kernel_moments(h_small)
    _, var_big = kernel_moments(h_big)
    sigma = np.sqrt(np.clip(var_big - var_small, 0.0, None))
    return gaussian_kernel(h_big.dims, sigma, h_big.voxel_size).data


def factorize_kernel(h_small: RangeKernel, h_big: RangeKernel,
                     opts: FactorizeOptions | None = None) -> FactorizationResult:
    """Find ``K`` minimising ``MAE(h_small (x) K, h_big)`` over the simplex.

    Raises
    ------
    GeometryError
        If the kernels are on different grids or ``h_big`` is narrower
        than ``h_small`` in second moment.
    ConvergenceError
        If the final MAE exceeds ``opts.mae_threshold``.
    """
    opts = opts or FactorizeOptions()
    if h_small.dims != h_big.dims or not np.allclose(h_small.voxel_size, h_big.voxel_size):
        raise GeometryError(f'kernels on different grids: {h_small.dims} vs {h_big.dims}')
    _, var_small = kernel_moments(h_small)
    _, var_big = kernel_moments(h_big)
    if np.any(var_big + 1e-9 < var_small):
        raise GeometryError(
            f'h_big is narrower than h_small (variances {var_big.tolist()} < {var_small.tolist()})'
        )
    small = h_small.data
    big = h_big.data
    n = big.size

    candidates = {'h_big': big.copy(), 'moment_matched': _moment_matched_start(h_small, h_big)}
    scores = {name: _mae(small, k, big) for name, k in candidates.items()}
    start = min(scores, key=lambda name: (scores[name], name))
    k = candidates[start]
    best_k, best_mae = k.copy(), scores[start]
    logger.info('Factorisation start %s, MAE %.3e (alternative %.3e)', start, best_mae,
                max(scores.values()))

    it = 0
    window_best = best_mae
    for it in range(1, opts.max_iter + 1):
        if best_mae == 0.0:
            break
        residual = convolve_array(k, small, 'zero') - big
        grad = correlate_array(np.sign(residual), small, 'zero') / n
        k = project_simplex(k - opts.learning_rate * grad)
        if not np.all(np.isfinite(k)):
            raise NumericalError('non-finite kernel iterate', where=f'iteration {it}')
        mae = _mae(small, k, big)
        if mae < best_mae:
            best_k, best_mae = k.copy(), mae
        if it % opts.log_every == 0:
            logger.info('Factorisation iteration %d: MAE %.3e', it, best_mae)
        if it % opts.patience == 0:
            if window_best - best_mae < opts.tol:
                break
            window_best = best_mae

    if best_mae > opts.mae_threshold:
        raise ConvergenceError(
            f'factorisation residual MAE {best_mae:.3e} above threshold {opts.mae_threshold:.1e}',
            residual=best_mae,
        )
    kernel = RangeKernel.from_array(best_k, h_big.voxel_size, {
        'kind': 'factorized', 'mae': best_mae, 'iterations': it, 'start': start,
    })
    logger.info('Factorisation finished after %d iterations, MAE %.3e', it, best_mae)
    return FactorizationResult(kernel=kernel, mae=best_mae, iterations=it, start=start)


__all__ = ['FactorizeOptions', 'FactorizationResult', 'project_simplex', 'factorize_kernel']
