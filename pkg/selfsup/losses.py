"""
losses.py
---------

Loss terms of the self-supervised denoiser and the positron range
correction (PRC) model, with the subgradients the tiny models train on.

Denoising:

    total = tsc + lambda_a * adv(y_S) + MAE(x, y_S)

where ``tsc`` is the uncertainty-weighted teacher-student consistency
and ``adv`` is a pluggable hook that returns 0 unless replaced.

PRC:

    prc = MAE(y_prc (x) H_rb, y_S)
    idt = MAE(y_S, y_prc)
    pkc = MAE(model(fdg (x) H_f2rb), fdg)
    total = prc + lambda_b * idt + pkc

The reblur convolution repeats the outermost voxel at the border and its
backward pass is the exact adjoint of that.  The F-18 to Rb-82 blur of
the FDG-like image uses the same reflect padding as the simulated
scanner.  The MAE subgradient at a zero residual is 0.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from deconv.convolution import convolve_adjoint, convolve_array
from physics.kernels import RangeKernel
from utils.errors import DegenerateInputError, GeometryError

AdvHook = Callable[[np.ndarray], float]


def zero_adv_hook(y_s: np.ndarray) -> float:
    """Adversarial term placeholder; always 0."""
    return 0.0


@dataclass(frozen=True)
class LossReport:
    tsc: float = 0.0
    mae_identity: float = 0.0
    prc: float = 0.0
    idt: float = 0.0
    pkc: float = 0.0
    adv: float = 0.0
    total: float = 0.0
    lambda_a: float = 0.05
    lambda_b: float = 0.5

    def weighted_sum(self) -> float:
        return (
            self.tsc + self.lambda_a * self.adv + self.mae_identity
            + self.prc + self.lambda_b * self.idt + self.pkc
        )

    def merged(self, other: 'LossReport') -> 'LossReport':
        """Combine the terms of two reports (e.g. denoise and PRC in joint training)."""
        parts = {
            k: getattr(self, k) + getattr(other, k)
            for k in ('tsc', 'mae_identity', 'prc', 'idt', 'pkc', 'adv')
        }
        merged = LossReport(**parts, lambda_a=self.lambda_a, lambda_b=other.lambda_b)
        return LossReport(**{**asdict(merged), 'total': merged.weighted_sum()})

    def to_record(self, step: int) -> Dict[str, float]:
        return {
            'step': int(step),
            'tsc': self.tsc,
            'mae': self.mae_identity,
            'prc': self.prc,
            'idt': self.idt,
            'pkc': self.pkc,
            'total': self.total,
        }

    def to_json_line(self, step: int) -> str:
        return json.dumps(self.to_record(step))


def _same_shape(*arrays: np.ndarray) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise GeometryError(f'shape mismatch: {sorted(shapes)}')


def mae(a: np.ndarray, b: np.ndarray) -> float:
    _same_shape(a, b)
    return float(np.abs(np.asarray(a) - np.asarray(b)).mean())


def mae_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Subgradient of ``MAE(pred, target)`` with respect to ``pred``."""
    return np.sign(np.asarray(pred) - np.asarray(target)) / np.size(pred)


def consistency_loss(y_hat_t: np.ndarray, y_s: np.ndarray, u: np.ndarray) -> float:
    """Uncertainty-weighted MAE ``sum((1-u)|yT - yS|) / sum(1-u)``.

    Raises
    ------
    DegenerateInputError
        If every weight is zero (``u`` identically 1).
    """
    _same_shape(y_hat_t, y_s, u)
    weights = 1.0 - np.asarray(u, dtype=np.float64)
    denom = float(weights.sum())
    if denom <= 0.0:
        raise DegenerateInputError('consistency loss weights sum to zero')
    return float((weights * np.abs(np.asarray(y_hat_t) - np.asarray(y_s))).sum() / denom)


def consistency_grad(y_hat_t: np.ndarray, y_s: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Subgradient of :func:`consistency_loss` with respect to ``y_s``."""
    weights = 1.0 - np.asarray(u, dtype=np.float64)
    denom = float(weights.sum())
    if denom <= 0.0:
        raise DegenerateInputError('consistency loss weights sum to zero')
    return weights * np.sign(np.asarray(y_s) - np.asarray(y_hat_t)) / denom


def denoise_loss(x: np.ndarray, y_s: np.ndarray, y_hat_t: np.ndarray, u: np.ndarray,
                 lambda_a: float = 0.05,
                 adv_hook: Optional[AdvHook] = None) -> LossReport:
    """Composite denoising objective; see the module docstring."""
    _same_shape(x, y_s, y_hat_t, u)
    hook = adv_hook or zero_adv_hook
    tsc = consistency_loss(y_hat_t, y_s, u)
    adv = float(hook(y_s))
    ident = mae(x, y_s)
    report = LossReport(tsc=tsc, mae_identity=ident, adv=adv, lambda_a=lambda_a)
    return LossReport(**{**asdict(report), 'total': report.weighted_sum()})


def denoise_grad(x: np.ndarray, y_s: np.ndarray, y_hat_t: np.ndarray,
                 u: np.ndarray) -> np.ndarray:
    """Gradient of :func:`denoise_loss` (default hook) with respect to ``y_s``."""
    return consistency_grad(y_hat_t, y_s, u) + mae_grad(y_s, x)


def _interior(shape: Tuple[int, ...], margin: int) -> np.ndarray:
    keep = np.zeros(shape, dtype=bool)
    if any(2 * margin >= d for d in shape):
        raise GeometryError(f'margin {margin} leaves no interior in {shape}')
    keep[tuple(slice(margin, d - margin) for d in shape)] = True
    return keep


def prc_terms(y_s: np.ndarray, y_prc: np.ndarray, h_rb: RangeKernel, lambda_b: float = 0.5,
              margin: int = 0) -> Tuple[float, float, np.ndarray, np.ndarray]:
    """Reblur and identity terms plus their gradients.

    Returns ``(prc, idt, d_y_prc, d_y_s)`` where the gradients are of
    ``prc + lambda_b * idt``.  ``margin`` restricts the reblur term to
    voxels at least that far from the border.
    """
    _same_shape(y_s, y_prc)
    reblurred = convolve_array(y_prc, h_rb.data, padding='edge')
    residual = reblurred - y_s
    keep = _interior(np.shape(y_s), margin) if margin else np.ones(np.shape(y_s), dtype=bool)
    n_keep = int(keep.sum())
    prc = float(np.abs(residual[keep]).sum() / n_keep)
    idt = mae(y_s, y_prc)
    sign_r = np.where(keep, np.sign(residual), 0.0) / n_keep
    d_prc = convolve_adjoint(sign_r, h_rb.data, padding='edge')
    d_idt = mae_grad(y_prc, y_s)
    d_y_prc = d_prc + lambda_b * d_idt
    d_y_s = -sign_r - lambda_b * d_idt
    return prc, idt, d_y_prc, d_y_s


def prc_losses(y_s: np.ndarray, y_prc: np.ndarray, h_rb: RangeKernel, fdg_img: np.ndarray,
               h_f2rb: RangeKernel, lambda_b: float = 0.5,
               model: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> LossReport:
    """Composite PRC objective on whole images; ``model=None`` means identity."""
    _same_shape(y_s, y_prc, fdg_img)
    prc, idt, _, _ = prc_terms(y_s, y_prc, h_rb, lambda_b)
    blurred_fdg = convolve_array(fdg_img, h_f2rb.data, padding='reflect')
    corrected = blurred_fdg if model is None else np.asarray(model(blurred_fdg))
    pkc = mae(corrected, fdg_img)
    report = LossReport(prc=prc, idt=idt, pkc=pkc, lambda_b=lambda_b)
    return LossReport(**{**asdict(report), 'total': report.weighted_sum()})


__all__ = [
    'AdvHook',
    'zero_adv_hook',
    'LossReport',
    'mae',
    'mae_grad',
    'consistency_loss',
    'consistency_grad',
    'denoise_loss',
    'denoise_grad',
    'prc_terms',
    'prc_losses',
]
