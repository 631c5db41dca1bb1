"""
networks.py
-----------

The two tiny convolutional models of the toolkit and their analytic
backward passes.

* the **denoiser** stacks dynamic-convolution layers whose kernels are
  modulated by attentions computed from the frame's noise encoding;
* the **PRC model** stacks plain 3x3x3 convolutions.

Parameters live in an ordered ``{name: array}`` mapping so that the EMA
teacher, the optimiser and the checkpoint writer all treat them the same
way.  Names follow ``l<i>.kernel``, ``l<i>.bias`` and, for dynamic layers,
``l<i>.att_<branch>.<w1|b1|w2|b2>``.

Identity initialisation carries the input on two paths, channel 0 for
its positive part and channel 1 for its negative part (``x = relu(x) -
relu(-x)``), and keeps every other channel from feeding them, so a fresh
model reproduces any input exactly while the side channels still receive
gradients.  Models one channel wide keep only the positive path.
Dynamic layers start with attentions of exactly 0.5, hence their delta
value of 2.

Example:

    arch = Architecture.denoiser()
    net = Network(arch, init_params(arch, seed=0))
    out = net.forward(frame / peak, encoding=noise_encoding(frame).value) * peak
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from models.layers import conv3d_backward, conv3d_forward, relu, relu_backward
from selfsup.dynamic_conv import (
    BRANCHES,
    AttentionTriple,
    attention_backward,
    attention_weights,
    dynamic_conv,
    dynamic_conv_backward,
    noise_encoding,
)
from utils.errors import GeometryError, NumericalError
from utils.rng import derived_rng

Params = Dict[str, np.ndarray]

SIDE_CHANNEL_SCALE = 0.05
ATTENTION_HIDDEN_BIAS = 0.5


@dataclass(frozen=True)
class Architecture:
    """Layer widths and layer type of a model.

    ``channels`` lists feature widths from input to output, so a model
    with ``n`` layers has ``n + 1`` entries.
    """

    channels: Tuple[int, ...]
    dynamic: bool = False
    kernel: int = 3
    hidden: int = 4
    use_relu: bool = True
    unit_attention: bool = False

    def __post_init__(self) -> None:
        chans = tuple(int(c) for c in self.channels)
        if len(chans) < 2 or min(chans) < 1:
            raise GeometryError(f'need at least one layer with positive widths, got {chans}')
        if chans[0] != 1 or chans[-1] != 1:
            raise GeometryError('models map one input channel to one output channel')
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise GeometryError(f'kernel size must be odd, got {self.kernel}')
        object.__setattr__(self, 'channels', chans)

    @property
    def n_layers(self) -> int:
        return len(self.channels) - 1

    @classmethod
    def denoiser(cls, width: int = 8, layers: int = 3, hidden: int = 4) -> 'Architecture':
        return cls((1,) + (width,) * (layers - 1) + (1,), dynamic=True, hidden=hidden)

    @classmethod
    def prc(cls, width: int = 8, layers: int = 5) -> 'Architecture':
        return cls((1,) + (width,) * (layers - 1) + (1,), dynamic=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'channels': list(self.channels),
            'dynamic': self.dynamic,
            'kernel': self.kernel,
            'hidden': self.hidden,
            'use_relu': self.use_relu,
            'unit_attention': self.unit_attention,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> 'Architecture':
        return cls(
            channels=tuple(doc['channels']),
            dynamic=bool(doc.get('dynamic', False)),
            kernel=int(doc.get('kernel', 3)),
            hidden=int(doc.get('hidden', 4)),
            use_relu=bool(doc.get('use_relu', True)),
            unit_attention=bool(doc.get('unit_attention', False)),
        )

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Ordered parameter names and shapes."""
        k, h = self.kernel, self.hidden
        shapes: Dict[str, Tuple[int, ...]] = {}
        for i in range(self.n_layers):
            c_in, c_out = self.channels[i], self.channels[i + 1]
            shapes[f'l{i}.kernel'] = (k, k, k, c_in, c_out)
            shapes[f'l{i}.bias'] = (c_out,)
            if self.dynamic:
                sizes = {'spa': k ** 3, 'in': c_in, 'out': c_out}
                for br in BRANCHES:
                    shapes[f'l{i}.att_{br}.w1'] = (h,)
                    shapes[f'l{i}.att_{br}.b1'] = (h,)
                    shapes[f'l{i}.att_{br}.w2'] = (sizes[br], h)
                    shapes[f'l{i}.att_{br}.b2'] = (sizes[br],)
        return shapes


def init_params(arch: Architecture, seed: int = 0) -> Params:
    """Identity initialisation; see the module docstring."""
    rng = derived_rng(seed, 0)
    k = arch.kernel
    c = k // 2
    delta = 2.0 if arch.dynamic and not arch.unit_attention else 1.0
    signed = min(arch.channels[1:-1], default=1) >= 2
    last = arch.n_layers - 1
    params: Params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith('.kernel'):
            layer = int(name[1:name.index('.')])
            w = np.zeros(shape)
            first_side = 2 if signed and layer < last else 1
            side = shape[:4] + (shape[4] - first_side,)
            if side[4] > 0:
                w[:, :, :, :, first_side:] = rng.normal(0.0, SIDE_CHANNEL_SCALE, size=side)
            w[c, c, c, 0, 0] = delta
            if signed:
                if layer == 0:
                    w[c, c, c, 0, 1] = -delta
                elif layer == last:
                    w[c, c, c, 1, 0] = -delta
                else:
                    w[c, c, c, 1, 1] = delta
            params[name] = w
        elif name.endswith('.w1'):
            params[name] = rng.uniform(-0.1, 0.1, size=shape)
        elif name.endswith('.b1'):
            params[name] = np.full(shape, ATTENTION_HIDDEN_BIAS)
        else:
            params[name] = np.zeros(shape)
    return params


def check_params(arch: Architecture, params: Mapping[str, np.ndarray]) -> None:
    """Raise :class:`GeometryError` unless ``params`` matches ``arch`` exactly."""
    shapes = arch.param_shapes()
    if set(shapes) != set(params):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise GeometryError(f'parameter names differ; missing {missing}, unexpected {extra}')
    for name, shape in shapes.items():
        if np.shape(params[name]) != shape:
            raise GeometryError(f'{name} has shape {np.shape(params[name])}, expected {shape}')


def copy_params(params: Mapping[str, np.ndarray]) -> Params:
    return {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}


@dataclass
class ForwardCache:
    encoding: float
    inputs: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    attentions: List[Optional[AttentionTriple]] = field(default_factory=list)


def _require_finite(arr: np.ndarray, what: str, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f'non-finite {what}', where=where)


class Network:
    """A model architecture bound to one parameter set."""

    def __init__(self, arch: Architecture, params: Mapping[str, np.ndarray]) -> None:
        check_params(arch, params)
        self.arch = arch
        self.params: Params = dict(params)

    def _layer_mlps(self, i: int) -> Dict[str, Dict[str, np.ndarray]]:
        return {
            br: {p: self.params[f'l{i}.att_{br}.{p}'] for p in ('w1', 'b1', 'w2', 'b2')}
            for br in BRANCHES
        }

    def _attention(self, i: int, encoding: float) -> AttentionTriple:
        c_in, c_out = self.arch.channels[i], self.arch.channels[i + 1]
        if self.arch.unit_attention:
            return AttentionTriple.constant(self.arch.kernel, c_in, c_out, 1.0)
        return attention_weights(encoding, self._layer_mlps(i), (self.arch.kernel, c_in, c_out))

    def forward_cached(self, x: np.ndarray,
                       encoding: Optional[float] = None) -> Tuple[np.ndarray, ForwardCache]:
        """Run the model on a 3-D array, keeping what :meth:`backward` needs.

        ``encoding`` defaults to the noise encoding of ``x`` itself.
        """
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim != 3:
            raise GeometryError(f'model input must be 3-D, got shape {arr.shape}')
        enc = 0.0
        if self.arch.dynamic:
            enc = float(noise_encoding(arr).value if encoding is None else encoding)
        cache = ForwardCache(encoding=enc)
        feat = arr[None]
        last = self.arch.n_layers - 1
        for i in range(self.arch.n_layers):
            w = self.params[f'l{i}.kernel']
            b = self.params[f'l{i}.bias']
            att = self._attention(i, enc) if self.arch.dynamic else None
            pre = conv3d_forward(feat, w, b) if att is None else dynamic_conv(feat, w, b, att)
            _require_finite(pre, 'activation', f'l{i}')
            cache.inputs.append(feat)
            cache.pre.append(pre)
            cache.attentions.append(att)
            feat = relu(pre) if self.arch.use_relu and i < last else pre
        return feat[0], cache

    def forward(self, x: np.ndarray, encoding: Optional[float] = None) -> np.ndarray:
        return self.forward_cached(x, encoding)[0]

    __call__ = forward

    def backward(self, cache: ForwardCache, d_out: np.ndarray) -> Tuple[Params, np.ndarray]:
        """Gradients of a scalar loss given ``d_out = dL/d(output)``.

        Returns the parameter gradients (same names as :attr:`params`) and
        the gradient with respect to the model input.

        Raises
        ------
        NumericalError
            If any gradient is non-finite; the message names the layer.
        """
        d = np.asarray(d_out, dtype=np.float64)[None]
        grads: Params = {}
        last = self.arch.n_layers - 1
        for i in reversed(range(self.arch.n_layers)):
            if self.arch.use_relu and i < last:
                d = relu_backward(cache.pre[i], d)
            w = self.params[f'l{i}.kernel']
            att = cache.attentions[i]
            if att is None:
                d_in, d_w, d_b = conv3d_backward(cache.inputs[i], w, d)
            else:
                d_in, d_w, d_b, d_att = dynamic_conv_backward(cache.inputs[i], w, att, d)
                if self.arch.unit_attention:
                    mlp_grads = {
                        br: {p: np.zeros_like(v) for p, v in mlp.items()}
                        for br, mlp in self._layer_mlps(i).items()
                    }
                else:
                    mlp_grads = attention_backward(cache.encoding, self._layer_mlps(i), d_att)
                for br, g in mlp_grads.items():
                    for p, v in g.items():
                        grads[f'l{i}.att_{br}.{p}'] = v
            grads[f'l{i}.kernel'] = d_w
            grads[f'l{i}.bias'] = d_b
            for name in [n for n in grads if n.startswith(f'l{i}.')]:
                _require_finite(grads[name], 'gradient', name)
            d = d_in
        return {name: grads[name] for name in self.params}, d[0]


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             learning_rate: float) -> Params:
    """Plain gradient descent on every parameter."""
    return {k: params[k] - learning_rate * grads[k] for k in params}


__all__ = [
    'Architecture',
    'Params',
    'init_params',
    'check_params',
    'copy_params',
    'ForwardCache',
    'Network',
    'sgd_step',
]
