"""
layers.py
---------

Multi-channel 3-D convolution layers with hand-written backward passes.

Feature maps are ``(C, X, Y, Z)`` arrays; weights are
``(k, k, k, C_in, C_out)`` and biases ``(C_out,)``.  The layer computes a
"same" cross-correlation, accumulated over the ``k**3`` kernel offsets
with one ``tensordot`` each, so memory stays at a few feature maps
regardless of kernel size.

Borders are edge-padded (the outermost voxel is repeated), so a constant
region touching the grid edge sees the same response as one in the
interior.  The backward pass folds the padded gradient back onto the
outermost voxels, which is the exact adjoint of that padding.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

from utils.errors import GeometryError


def _check(x: np.ndarray, w: np.ndarray) -> int:
    if x.ndim != 4:
        raise GeometryError(f'feature map must be (C, X, Y, Z), got {x.shape}')
    if w.ndim != 5 or not (w.shape[0] == w.shape[1] == w.shape[2]) or w.shape[0] % 2 == 0:
        raise GeometryError(f'weights must be (k, k, k, C_in, C_out) with odd k, got {w.shape}')
    if w.shape[3] != x.shape[0]:
        raise GeometryError(f'weights expect {w.shape[3]} input channels, got {x.shape[0]}')
    return w.shape[0] // 2


def edge_pad(x: np.ndarray, pad: int) -> np.ndarray:
    """Pad the three spatial axes of ``x`` by repeating their outermost voxels."""
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)), mode='edge')


def edge_pad_adjoint(dxp: np.ndarray, pad: int) -> np.ndarray:
    """Adjoint of :func:`edge_pad`: fold each margin onto its edge voxel."""
    if pad == 0:
        return dxp
    out = dxp
    for axis in (1, 2, 3):
        n = out.shape[axis] - 2 * pad
        inner = np.take(out, np.arange(pad, pad + n), axis=axis).copy()
        low = np.take(out, np.arange(pad), axis=axis).sum(axis=axis)
        high = np.take(out, np.arange(pad + n, n + 2 * pad), axis=axis).sum(axis=axis)
        first = [slice(None)] * 4
        first[axis] = 0
        last = [slice(None)] * 4
        last[axis] = n - 1
        inner[tuple(first)] += low
        inner[tuple(last)] += high
        out = inner
    return out


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Edge-padded "same" cross-correlation plus bias."""
    pad = _check(x, w)
    k = w.shape[0]
    if b.shape != (w.shape[4],):
        raise GeometryError(f'bias must have shape ({w.shape[4]},), got {b.shape}')
    _, nx, ny, nz = x.shape
    xp = edge_pad(x, pad)
    out = np.zeros((w.shape[4], nx, ny, nz))
    for i in range(k):
        for j in range(k):
            for m in range(k):
                patch = xp[:, i:i + nx, j:j + ny, m:m + nz]
                out += np.tensordot(w[i, j, m], patch, axes=([0], [0]))
    out += b[:, None, None, None]
    return out


def conv3d_backward(x: np.ndarray, w: np.ndarray,
                    d_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(d_x, d_w, d_b)`` for :func:`conv3d_forward`."""
    pad = _check(x, w)
    k = w.shape[0]
    _, nx, ny, nz = x.shape
    if d_out.shape != (w.shape[4], nx, ny, nz):
        raise GeometryError(f'output gradient has shape {d_out.shape}')
    xp = edge_pad(x, pad)
    dxp = np.zeros(xp.shape)
    dw = np.zeros_like(w, dtype=np.float64)
    for i in range(k):
        for j in range(k):
            for m in range(k):
                window = (slice(None), slice(i, i + nx), slice(j, j + ny), slice(m, m + nz))
                dw[i, j, m] = np.tensordot(xp[window], d_out, axes=([1, 2, 3], [1, 2, 3]))
                dxp[window] += np.tensordot(w[i, j, m], d_out, axes=([1], [0]))
    dx = edge_pad_adjoint(dxp, pad)
    db = d_out.sum(axis=(1, 2, 3))
    return dx, dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(pre: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    return np.where(pre > 0, d_out, 0.0)


__all__ = ['conv3d_forward', 'conv3d_backward', 'edge_pad', 'edge_pad_adjoint', 'relu',
           'relu_backward']
