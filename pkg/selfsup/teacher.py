"""
teacher.py
----------

Mean-teacher machinery: the exponential moving average of student
parameters, pseudo-labels averaged over ``M`` masked teacher passes and
the per-voxel uncertainty of those passes.

Uncertainty is the mean absolute deviation of the passes about their
mean, divided by ``(max deviation + 1e-12)`` so it lies in ``[0, 1)``.
"""

from __future__ import annotations

from typing import Callable, Dict, Mapping, Tuple, Union

import numpy as np

from selfsup.masking import n2v_mask
from utils.errors import GeometryError
from utils.rng import SeedLike

UNCERTAINTY_EPS = 1e-12


def _ema_array(t: np.ndarray, s: np.ndarray, alpha: float, name: str = '') -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if t.shape != s.shape:
        where = f' for {name}' if name else ''
        raise GeometryError(f'EMA shape mismatch{where}: {t.shape} vs {s.shape}')
    return alpha * t + (1.0 - alpha) * s


def ema_update(theta_t: Union[np.ndarray, Mapping[str, np.ndarray]],
               theta_s: Union[np.ndarray, Mapping[str, np.ndarray]],
               alpha: float = 0.99) -> Union[np.ndarray, Dict[str, np.ndarray]]:
    """Return ``alpha * theta_t + (1 - alpha) * theta_s``.

    Accepts single arrays or name-to-array mappings (same keys).

    Raises
    ------
    ValueError
        If ``alpha`` is outside ``[0, 1]``.
    GeometryError
        On key or shape mismatch.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f'alpha must lie in [0, 1], got {alpha}')
    if isinstance(theta_t, Mapping) and isinstance(theta_s, Mapping):
        if set(theta_t) != set(theta_s):
            raise GeometryError('teacher and student parameter names differ')
        return {k: _ema_array(theta_t[k], theta_s[k], alpha, k) for k in theta_t}
    if isinstance(theta_t, Mapping) or isinstance(theta_s, Mapping):
        raise GeometryError('cannot mix parameter mappings and arrays')
    return _ema_array(theta_t, theta_s, alpha)


def teacher_pseudo_label(model: Callable[[np.ndarray], np.ndarray], x: np.ndarray, M: int = 4,
                         seed: SeedLike = 0, fraction: float = 0.5,
                         substitute: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Average ``model`` over ``M`` independently masked copies of ``x``.

    Pass ``m`` uses the mask stream ``(seed, m)``.  Returns the mean and
    the stacked per-pass outputs of shape ``(M,) + x.shape``.
    """
    if M < 1:
        raise ValueError(f'M must be >= 1, got {M}')
    base = (int(seed),) if isinstance(seed, (int, np.integer)) else tuple(int(s) for s in seed)
    passes = []
    for m in range(M):
        masked, _ = n2v_mask(np.asarray(x, dtype=np.float64), fraction, base + (m,), substitute)
        passes.append(np.asarray(model(masked), dtype=np.float64))
    stacked = np.stack(passes, axis=0)
    return stacked.sum(axis=0) / M, stacked


def teacher_uncertainty(per_pass: np.ndarray, y_hat_t: np.ndarray,
                        normalize: bool = True) -> np.ndarray:
    """Per-voxel mean absolute deviation of the passes, normalised into ``[0, 1)``."""
    passes = np.asarray(per_pass, dtype=np.float64)
    if passes.ndim < 1 or passes.shape[0] < 2:
        raise ValueError('uncertainty needs at least two passes')
    if passes.shape[1:] != np.shape(y_hat_t):
        raise GeometryError(f'pass shape {passes.shape[1:]} differs from mean {np.shape(y_hat_t)}')
    mad = np.abs(passes - np.asarray(y_hat_t)[None]).mean(axis=0)
    if not normalize:
        return mad
    return mad / (mad.max() + UNCERTAINTY_EPS)


__all__ = ['ema_update', 'teacher_pseudo_label', 'teacher_uncertainty']
