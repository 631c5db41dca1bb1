"""
dynamic_conv.py
---------------

Noise-conditioned dynamic convolution.

A scalar noise encoding of the input frame drives three small dense
networks (``encoding -> hidden -> ReLU -> out -> sigmoid``) producing a
spatial attention over the ``k x k x k`` kernel taps, an input-channel
attention and an output-channel attention.  The layer kernel is
modulated by the mean of the three broadcast attentions before an
ordinary convolution:

    W_mod = W * (att_spa + att_in + att_out) / 3
    F_out = conv(F_in, W_mod) + B

Attention network parameters for one branch are a mapping with keys
``w1`` (H,), ``b1`` (H,), ``w2`` (out, H) and ``b2`` (out,).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Tuple

import numpy as np
from scipy.special import expit  # type: ignore

from models.layers import conv3d_backward, conv3d_forward
from utils.errors import GeometryError
from volume.core import Volume3

BRANCHES = ('spa', 'in', 'out')
MLP = Mapping[str, np.ndarray]


@dataclass(frozen=True)
class NoiseEncoding:
    """``sin(total activity) + cos(SD of nonzero voxels)``, always in [-2, 2]."""

    value: float
    total: float
    sd_nonzero: float


@dataclass(frozen=True)
class AttentionTriple:
    att_spa: np.ndarray
    att_in: np.ndarray
    att_out: np.ndarray

    @classmethod
    def constant(cls, k: int, c_in: int, c_out: int, value: float = 1.0) -> 'AttentionTriple':
        return cls(np.full((k, k, k), value), np.full(c_in, value), np.full(c_out, value))

    def combined(self) -> np.ndarray:
        """Mean of the three attentions broadcast to ``(k, k, k, C_in, C_out)``."""
        return (
            self.att_spa[:, :, :, None, None]
            + self.att_in[None, None, None, :, None]
            + self.att_out[None, None, None, None, :]
        ) / 3.0


def noise_encoding(vol: np.ndarray | Volume3) -> NoiseEncoding:
    """Encode a frame's noise level from its total and its nonzero-voxel SD.

    The SD of an all-zero volume is defined as 0.
    """
    arr = vol.data if isinstance(vol, Volume3) else np.asarray(vol, dtype=np.float64)
    total = float(arr.sum())
    nonzero = arr[arr != 0]
    sd = float(nonzero.std()) if nonzero.size else 0.0
    return NoiseEncoding(value=float(np.sin(total) + np.cos(sd)), total=total, sd_nonzero=sd)


def _mlp_forward(encoding: float, p: MLP) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    pre_hidden = p['w1'] * encoding + p['b1']
    hidden = np.maximum(pre_hidden, 0.0)
    out = expit(p['w2'] @ hidden + p['b2'])
    return out, pre_hidden, hidden


def _check_mlp(name: str, p: MLP, size: int) -> None:
    h = np.shape(p['w1'])
    if np.shape(p['b1']) != h or np.shape(p['w2']) != (size,) + h or np.shape(p['b2']) != (size,):
        raise GeometryError(
            f'attention branch {name!r} expects w1/b1 {h}, w2 ({size}, {h[0] if h else "?"}), '
            f'b2 ({size},); got {np.shape(p["w2"])}, {np.shape(p["b2"])}'
        )


def attention_weights(encoding: float, layer_params: Mapping[str, MLP],
                      kernel_shape: Tuple[int, int, int]) -> AttentionTriple:
    """Evaluate the three attention branches for one layer.

    ``kernel_shape`` is ``(k, C_in, C_out)`` of the modulated layer.
    """
    k, c_in, c_out = kernel_shape
    sizes = {'spa': k ** 3, 'in': c_in, 'out': c_out}
    outs = {}
    for name in BRANCHES:
        _check_mlp(name, layer_params[name], sizes[name])
        outs[name] = _mlp_forward(float(encoding), layer_params[name])[0]
    return AttentionTriple(outs['spa'].reshape(k, k, k), outs['in'], outs['out'])


def attention_jacobian(encoding: float, layer_params: Mapping[str, MLP],
                       kernel_shape: Tuple[int, int, int]) -> AttentionTriple:
    """Analytic derivative of every attention entry with respect to the encoding."""
    k, _, _ = kernel_shape
    derivs = {}
    for name in BRANCHES:
        p = layer_params[name]
        out, pre_hidden, _ = _mlp_forward(float(encoding), p)
        d_hidden = np.where(pre_hidden > 0, p['w1'], 0.0)
        derivs[name] = out * (1.0 - out) * (p['w2'] @ d_hidden)
    return AttentionTriple(derivs['spa'].reshape(k, k, k), derivs['in'], derivs['out'])


def attention_backward(encoding: float, layer_params: Mapping[str, MLP],
                       d_att: AttentionTriple) -> Dict[str, Dict[str, np.ndarray]]:
    """Back-propagate attention gradients into the dense-layer parameters."""
    grads: Dict[str, Dict[str, np.ndarray]] = {}
    upstream = {'spa': d_att.att_spa.reshape(-1), 'in': d_att.att_in, 'out': d_att.att_out}
    for name in BRANCHES:
        p = layer_params[name]
        out, pre_hidden, hidden = _mlp_forward(float(encoding), p)
        d_logit = upstream[name] * out * (1.0 - out)
        d_hidden = p['w2'].T @ d_logit
        d_pre = np.where(pre_hidden > 0, d_hidden, 0.0)
        grads[name] = {
            'w2': np.outer(d_logit, hidden),
            'b2': d_logit,
            'w1': d_pre * encoding,
            'b1': d_pre,
        }
    return grads


def _check_att(w: np.ndarray, att: AttentionTriple) -> None:
    k, _, _, c_in, c_out = w.shape
    if (att.att_spa.shape != (k, k, k) or att.att_in.shape != (c_in,)
            or att.att_out.shape != (c_out,)):
        raise GeometryError(
            f'attention shapes {att.att_spa.shape}, {att.att_in.shape}, {att.att_out.shape} '
            f'do not match kernel {w.shape}'
        )


def dynamic_conv(f_in: np.ndarray, w: np.ndarray, b: np.ndarray,
                 att: AttentionTriple) -> np.ndarray:
    """Attention-modulated convolution of a ``(C_in, X, Y, Z)`` feature map."""
    _check_att(w, att)
    return conv3d_forward(f_in, w * att.combined(), b)


def dynamic_conv_backward(f_in: np.ndarray, w: np.ndarray, att: AttentionTriple,
                          d_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray,
                                                      AttentionTriple]:
    """Return ``(d_in, d_w, d_b, d_att)`` for :func:`dynamic_conv`."""
    _check_att(w, att)
    a = att.combined()
    d_in, d_wmod, d_b = conv3d_backward(f_in, w * a, d_out)
    d_a = d_wmod * w / 3.0
    d_att = AttentionTriple(
        att_spa=d_a.sum(axis=(3, 4)),
        att_in=d_a.sum(axis=(0, 1, 2, 4)),
        att_out=d_a.sum(axis=(0, 1, 2, 3)),
    )
    return d_in, d_wmod * a, d_b, d_att


__all__ = [
    'NoiseEncoding',
    'AttentionTriple',
    'noise_encoding',
    'attention_weights',
    'attention_jacobian',
    'attention_backward',
    'dynamic_conv',
    'dynamic_conv_backward',
]
