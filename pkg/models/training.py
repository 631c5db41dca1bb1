"""
training.py
-----------

Training procedures for the tiny denoiser and PRC models.

Training runs in two stages followed by an optional joint fine-tune:

1. ``train_denoiser`` fits the denoiser on patches of dynamic frames
   with the mean-teacher objective (masked teacher passes, uncertainty
   weighted consistency, identity MAE).
2. ``train_prc`` fits the PRC model on patches of static images with the
   reblur, identity and pseudo-label consistency terms.
3. ``fine_tune_joint`` chains both models on dynamic frames and updates
   them together.

Every random draw comes from a Philox stream keyed by
``(seed, stream, step)`` so identical configs reproduce identical
parameters bit for bit.

Each image is divided by its own peak absolute value before entering a
model and multiplied back afterwards, during training and when applying
the models, so frames from the first seconds of a scan and the late
uptake phase reach the networks on one scale.  An all-zero image maps to
zeros.  The noise encoding is always taken from the raw Bq/ml frame.

Masked teacher passes see the kept voxels divided by the kept fraction,
so a masked pass has the same expected intensity as the unmasked input.

Example:

    cfg = TrainConfig(stage='denoise', steps_per_epoch=200)
    state = train_denoiser(series, cfg)
    out = apply_pipeline(series, state, prc_state)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from deconv.convolution import convolve_array
from models.networks import Architecture, Network, Params, copy_params, init_params, sgd_step
from physics.kernels import RangeKernel
from selfsup.dynamic_conv import noise_encoding
from selfsup.losses import (
    LossReport,
    denoise_grad,
    denoise_loss,
    mae,
    mae_grad,
    prc_terms,
)
from selfsup.teacher import ema_update, teacher_pseudo_label, teacher_uncertainty
from utils.errors import DegenerateInputError, GeometryError, NumericalError
from utils.logging_utils import get_logger
from utils.rng import derived_rng
from volume.core import DynamicSeries, Volume3

logger = get_logger(__name__)

STAGES = ('denoise', 'prc', 'joint')
NORMALIZATION = 'frame_peak'

# Stream identifiers for derived_rng(seed, stream, step).
STREAM_PATCH = 1
STREAM_MASK = 2

@dataclass(frozen=True)
class TrainConfig:
    stage: str = 'denoise'
    epochs: int = 1
    steps_per_epoch: int = 200
    patch: Tuple[int, int, int] = (32, 32, 8)
    prc_patch: Tuple[int, int, int] = (32, 32, 16)
    learning_rate: float = 1e-3
    lambda_a: float = 0.05
    lambda_b: float = 0.5
    alpha: float = 0.99
    M: int = 4
    seed: int = 0
    mask_fraction: float = 0.5
    substitute: bool = False
    prc_margin: int = 0
    log_every: int = 50
    max_patch_tries: int = 50
    width: int = 8
    denoiser_layers: int = 3
    prc_layers: int = 5
    hidden: int = 4

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f'stage must be one of {STAGES}, got {self.stage!r}')
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError('epochs and steps_per_epoch must be positive')
        if self.learning_rate <= 0:
            raise ValueError(f'learning rate must be positive, got {self.learning_rate}')
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f'alpha must lie in [0, 1], got {self.alpha}')
        if self.M < 1:
            raise ValueError(f'M must be >= 1, got {self.M}')
        if not 0.0 <= self.mask_fraction < 1.0:
            raise ValueError(f'mask_fraction must lie in [0, 1), got {self.mask_fraction}')
        object.__setattr__(self, 'patch', tuple(int(p) for p in self.patch))
        object.__setattr__(self, 'prc_patch', tuple(int(p) for p in self.prc_patch))

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any] | None) -> 'TrainConfig':
        doc = dict(doc or {})
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f'unknown training options: {unknown}')
        for key in ('patch', 'prc_patch'):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out['patch'] = list(self.patch)
        out['prc_patch'] = list(self.prc_patch)
        return out

    def denoiser_arch(self) -> Architecture:
        return Architecture.denoiser(self.width, self.denoiser_layers, self.hidden)

    def prc_arch(self) -> Architecture:
        return Architecture.prc(self.width, self.prc_layers)


@dataclass
class ModelState:
    """Parameters of one model plus the bookkeeping needed to resume or apply it.

    ``teacher`` is ``None`` for models trained without a mean teacher.
    """

    arch: Architecture
    student: Params
    teacher: Optional[Params] = None
    step: int = 0
    seed: int = 0
    stage: str = 'denoise'
    voxel_size: Optional[Tuple[float, float, float]] = None
    loss_log: List[Dict[str, float]] = field(default_factory=list)
    trajectory: List[Params] = field(default_factory=list)

    def __post_init__(self) -> None:
        Network(self.arch, self.student)
        copies = [('student', self.student)]
        if self.teacher is not None:
            Network(self.arch, self.teacher)
            copies.append(('teacher', self.teacher))
        for role, params in copies:
            for name, value in params.items():
                if not np.all(np.isfinite(value)):
                    raise NumericalError('parameter is not finite', where=f'{role}/{name}')

    def network(self, teacher: bool = False) -> Network:
        if teacher:
            if self.teacher is None:
                raise ValueError('this model has no teacher copy')
            return Network(self.arch, self.teacher)
        return Network(self.arch, self.student)

    @classmethod
    def identity(cls, arch: Architecture, seed: int = 0, with_teacher: bool = True,
                 stage: str = 'denoise') -> 'ModelState':
        student = init_params(arch, seed)
        teacher = copy_params(student) if with_teacher else None
        return cls(arch, student, teacher, seed=seed, stage=stage)


@dataclass(frozen=True)
class PatchIndex:
    image: int
    corner: Tuple[int, int, int]
    shape: Tuple[int, int, int]

    def take(self, volume: np.ndarray) -> np.ndarray:
        sl = tuple(slice(c, c + s) for c, s in zip(self.corner, self.shape))
        return np.array(volume[sl], dtype=np.float64)


def _fit_patch(dims: Sequence[int], patch: Sequence[int]) -> Tuple[int, int, int]:
    a, b, c = (min(int(p), int(d)) for p, d in zip(patch, dims))
    return (a, b, c)


def sample_patch(images: Sequence[np.ndarray], patch: Sequence[int], rng: np.random.Generator,
                 max_tries: int = 50) -> PatchIndex:
    """Pick an image and a patch corner, rejecting patches that are mostly zeros.

    A patch is rejected when more than half of its voxels are exactly
    zero.  After ``max_tries`` rejections the last candidate is kept and
    a warning is logged.
    """
    if not images:
        raise DegenerateInputError('no images to sample patches from')
    shape = _fit_patch(images[0].shape, patch)
    candidate = PatchIndex(0, (0, 0, 0), shape)
    for _ in range(max(1, max_tries)):
        idx = int(rng.integers(len(images)))
        corner = tuple(int(rng.integers(d - s + 1)) for d, s in zip(images[idx].shape, shape))
        candidate = PatchIndex(idx, corner, shape)  # type: ignore[arg-type]
        values = candidate.take(images[idx])
        if np.count_nonzero(values == 0.0) * 2 <= values.size:
            return candidate
    logger.warning('no patch with a nonzero majority after %d tries; keeping the last one',
                   max_tries)
    return candidate


def peak_scale(image: np.ndarray) -> float:
    """Largest absolute value of ``image``; 1.0 for an all-zero image."""
    peak = float(np.abs(image).max()) if np.size(image) else 0.0
    return peak if peak > 0.0 else 1.0


def _normalised(images: Sequence[np.ndarray], what: str) -> List[np.ndarray]:
    if not any(np.any(im) for im in images):
        raise DegenerateInputError(f'{what} are all zeros')
    return [np.asarray(im, dtype=np.float64) / peak_scale(im) for im in images]


def _log_progress(stage: str, step: int, report: LossReport, every: int) -> None:
    if every > 0 and step % every == 0:
        logger.info('%s step %d: total=%.6g tsc=%.6g mae=%.6g prc=%.6g idt=%.6g pkc=%.6g',
                    stage, step, report.total, report.tsc, report.mae_identity,
                    report.prc, report.idt, report.pkc, extra={'stage': stage})


def _add(a: Params, b: Mapping[str, np.ndarray]) -> Params:
    return {k: a[k] + b[k] for k in a}


def _with_total(report: LossReport) -> LossReport:
    return LossReport(**{**asdict(report), 'total': report.weighted_sum()})


def _denoise_pass(student: Network, teacher: Network, x: np.ndarray, encoding: float,
                  cfg: TrainConfig, step: int):
    y_s, cache = student.forward_cached(x, encoding)
    keep = 1.0 if cfg.substitute else 1.0 - cfg.mask_fraction
    y_hat_t, passes = teacher_pseudo_label(
        lambda z: teacher.forward(z / keep, encoding), x, cfg.M,
        seed=(cfg.seed, STREAM_MASK, step), fraction=cfg.mask_fraction,
        substitute=cfg.substitute,
    )
    u = teacher_uncertainty(passes, y_hat_t) if cfg.M >= 2 else np.zeros_like(x)
    report = denoise_loss(x, y_s, y_hat_t, u, cfg.lambda_a)
    return y_s, cache, report, denoise_grad(x, y_s, y_hat_t, u)


def _prc_pass(net: Network, y_s: np.ndarray, fdg: np.ndarray, fdg_blurred: np.ndarray,
              h_rb: RangeKernel, cfg: TrainConfig) -> Tuple[LossReport, Params, np.ndarray]:
    """PRC objective on one patch; returns report, parameter grads and dL/dy_s.

    ``fdg_blurred`` is the patch of the FDG-like image already blurred
    with the F-18 to Rb-82 kernel on the whole grid.
    """
    y_prc, cache = net.forward_cached(y_s)
    prc, idt, d_y_prc, d_y_s = prc_terms(y_s, y_prc, h_rb, cfg.lambda_b, cfg.prc_margin)
    grads, d_in = net.backward(cache, d_y_prc)
    corrected, fdg_cache = net.forward_cached(fdg_blurred)
    pkc = mae(corrected, fdg)
    fdg_grads, _ = net.backward(fdg_cache, mae_grad(corrected, fdg))
    report = _with_total(LossReport(prc=prc, idt=idt, pkc=pkc, lambda_b=cfg.lambda_b))
    return report, _add(grads, fdg_grads), d_y_s + d_in


def _blurred_fdgs(fdgs: Sequence[np.ndarray], h_f2rb: RangeKernel) -> List[np.ndarray]:
    return [convolve_array(f, h_f2rb.data, padding='reflect') for f in fdgs]


def _check_kernel_grid(kernel: RangeKernel, voxel_size: Sequence[float], name: str) -> None:
    if not np.allclose(kernel.voxel_size, voxel_size, rtol=1e-6, atol=0.0):
        raise GeometryError(
            f'{name} voxel size {kernel.voxel_size} differs from image voxel size {voxel_size}'
        )


def train_denoiser(series: DynamicSeries, cfg: TrainConfig | None = None,
                   initial_state: ModelState | None = None,
                   record_trajectory: bool = False) -> ModelState:
    """Train the denoiser with the mean-teacher objective.

    Parameters
    ----------
    series : DynamicSeries
        Noisy dynamic frames in Bq/ml.
    cfg : TrainConfig, optional
        Training options; defaults to ``TrainConfig(stage='denoise')``.
    initial_state : ModelState, optional
        Resume from this state instead of the identity initialisation.
    record_trajectory : bool
        Keep a copy of the student parameters after every step.

    Raises
    ------
    DegenerateInputError
        If the series has no frames or is all zeros.
    """
    cfg = cfg or TrainConfig(stage='denoise')
    if len(series) < 1:
        raise DegenerateInputError('series has no frames')
    frames = _normalised([v.data for v in series.volumes], 'dynamic frames')
    encodings = [noise_encoding(v).value for v in series.volumes]
    if initial_state is None:
        state = ModelState.identity(cfg.denoiser_arch(), cfg.seed, True, 'denoise')
    else:
        state = initial_state
    arch = state.arch
    student = copy_params(state.student)
    teacher = copy_params(state.teacher if state.teacher is not None else state.student)
    log = list(state.loss_log)
    trajectory: List[Params] = []
    step = state.step
    logger.info('training denoiser for %d steps on %d frames',
                cfg.total_steps, len(frames), extra={'stage': 'denoise'})
    for _ in range(cfg.total_steps):
        step += 1
        idx = sample_patch(frames, cfg.patch, derived_rng(cfg.seed, STREAM_PATCH, step),
                           cfg.max_patch_tries)
        x = idx.take(frames[idx.image])
        s_net = Network(arch, student)
        _, cache, report, d_ys = _denoise_pass(s_net, Network(arch, teacher), x,
                                               encodings[idx.image], cfg, step)
        grads, _ = s_net.backward(cache, d_ys)
        student = sgd_step(student, grads, cfg.learning_rate)
        teacher = ema_update(teacher, student, cfg.alpha)  # type: ignore[assignment]
        log.append(report.to_record(step))
        if record_trajectory:
            trajectory.append(copy_params(student))
        _log_progress('denoise', step, report, cfg.log_every)
    return ModelState(arch, student, teacher, step, cfg.seed, 'denoise',
                      series.voxel_size, log, trajectory)


def train_prc(static_imgs: Sequence[Volume3], h_rb: RangeKernel, h_f2rb: RangeKernel,
              fdg_like_imgs: Sequence[Volume3], cfg: TrainConfig | None = None,
              initial_state: ModelState | None = None) -> ModelState:
    """Train the PRC model on static images and FDG-like pseudo-label images.

    Raises
    ------
    GeometryError
        If image grids differ from each other or from the kernels.
    """
    cfg = cfg or TrainConfig(stage='prc')
    if not static_imgs or not fdg_like_imgs:
        raise DegenerateInputError('PRC training needs static and FDG-like images')
    ref = static_imgs[0]
    for vol in list(static_imgs) + list(fdg_like_imgs):
        if not vol.same_geometry(ref):
            raise GeometryError('static and FDG-like images must share one grid')
    _check_kernel_grid(h_rb, ref.voxel_size, 'Rb-82 kernel')
    _check_kernel_grid(h_f2rb, ref.voxel_size, 'F-18 to Rb-82 kernel')
    statics = _normalised([v.data for v in static_imgs], 'static images')
    fdgs = _normalised([v.data for v in fdg_like_imgs], 'FDG-like images')
    blurred = _blurred_fdgs(fdgs, h_f2rb)
    if initial_state is None:
        state = ModelState.identity(cfg.prc_arch(), cfg.seed, False, 'prc')
    else:
        state = initial_state
    params = copy_params(state.student)
    log = list(state.loss_log)
    step = state.step
    logger.info('training PRC model for %d steps on %d static images',
                cfg.total_steps, len(statics), extra={'stage': 'prc'})
    for _ in range(cfg.total_steps):
        step += 1
        idx = sample_patch(statics, cfg.prc_patch, derived_rng(cfg.seed, STREAM_PATCH, step),
                           cfg.max_patch_tries)
        y_s = idx.take(statics[idx.image])
        k = idx.image % len(fdgs)
        report, grads, _ = _prc_pass(Network(state.arch, params), y_s, idx.take(fdgs[k]),
                                     idx.take(blurred[k]), h_rb, cfg)
        params = sgd_step(params, grads, cfg.learning_rate)
        log.append(report.to_record(step))
        _log_progress('prc', step, report, cfg.log_every)
    return ModelState(state.arch, params, None, step, cfg.seed, 'prc', ref.voxel_size, log)


def fine_tune_joint(series: DynamicSeries, denoiser: ModelState, prc_model: ModelState,
                    h_rb: RangeKernel, h_f2rb: RangeKernel, fdg_like_imgs: Sequence[Volume3],
                    cfg: TrainConfig | None = None) -> Tuple[ModelState, ModelState]:
    """Fine-tune denoiser and PRC model end to end on dynamic frames.

    The PRC loss gradient flows through the PRC model back into the
    denoiser output, so both parameter sets change.
    """
    cfg = cfg or TrainConfig(stage='joint')
    if not fdg_like_imgs:
        raise DegenerateInputError('joint fine-tuning needs FDG-like images')
    for vol in fdg_like_imgs:
        if vol.dims != series.dims:
            raise GeometryError(f'FDG-like image dims {vol.dims} differ from series {series.dims}')
    _check_kernel_grid(h_rb, series.voxel_size, 'Rb-82 kernel')
    _check_kernel_grid(h_f2rb, series.voxel_size, 'F-18 to Rb-82 kernel')
    frames = _normalised([v.data for v in series.volumes], 'dynamic frames')
    fdgs = _normalised([v.data for v in fdg_like_imgs], 'FDG-like images')
    blurred = _blurred_fdgs(fdgs, h_f2rb)
    encodings = [noise_encoding(v).value for v in series.volumes]
    d_params = copy_params(denoiser.student)
    teacher = copy_params(denoiser.teacher if denoiser.teacher is not None else denoiser.student)
    p_params = copy_params(prc_model.student)
    d_log, p_log = list(denoiser.loss_log), list(prc_model.loss_log)
    step = max(denoiser.step, prc_model.step)
    logger.info('joint fine-tuning for %d steps', cfg.total_steps, extra={'stage': 'joint'})
    for _ in range(cfg.total_steps):
        step += 1
        idx = sample_patch(frames, cfg.prc_patch, derived_rng(cfg.seed, STREAM_PATCH, step),
                           cfg.max_patch_tries)
        x = idx.take(frames[idx.image])
        k = step % len(fdgs)
        s_net = Network(denoiser.arch, d_params)
        y_s, cache, d_report, d_ys = _denoise_pass(
            s_net, Network(denoiser.arch, teacher), x, encodings[idx.image], cfg, step
        )
        p_report, p_grads, d_prc_in = _prc_pass(
            Network(prc_model.arch, p_params), y_s, idx.take(fdgs[k]), idx.take(blurred[k]),
            h_rb, cfg
        )
        d_grads, _ = s_net.backward(cache, d_ys + d_prc_in)
        d_params = sgd_step(d_params, d_grads, cfg.learning_rate)
        p_params = sgd_step(p_params, p_grads, cfg.learning_rate)
        teacher = ema_update(teacher, d_params, cfg.alpha)  # type: ignore[assignment]
        report = d_report.merged(p_report)
        d_log.append(report.to_record(step))
        p_log.append(report.to_record(step))
        _log_progress('joint', step, report, cfg.log_every)
    new_d = ModelState(denoiser.arch, d_params, teacher, step, denoiser.seed, 'joint',
                       series.voxel_size, d_log)
    new_p = ModelState(prc_model.arch, p_params, None, step, prc_model.seed, 'joint',
                       series.voxel_size, p_log)
    return new_d, new_p


def apply_pipeline(series: DynamicSeries, denoiser: ModelState | None = None,
                   prc_model: ModelState | None = None) -> DynamicSeries:
    """Run every frame through the denoiser and then the PRC model.

    Either model may be ``None`` to skip that component.  Both models see
    the frame divided by its peak, the scale the joint fine-tune trains
    the chain on.  The schedule and grid of the series are preserved.
    """
    for state in (denoiser, prc_model):
        if state is not None and state.voxel_size is not None:
            if not np.allclose(state.voxel_size, series.voxel_size, rtol=1e-6, atol=0.0):
                raise GeometryError(
                    f'model trained on voxel size {state.voxel_size}, '
                    f'series has {series.voxel_size}'
                )
    d_net = denoiser.network() if denoiser is not None else None
    p_net = prc_model.network() if prc_model is not None else None
    out = []
    for vol in series.volumes:
        y = np.array(vol.data, dtype=np.float64)
        if not np.any(y):
            out.append(y)
            continue
        scale = peak_scale(y)
        y = y / scale
        if d_net is not None:
            y = d_net.forward(y, noise_encoding(vol).value)
        if p_net is not None:
            y = p_net.forward(y)
        out.append(y * scale)
    return series.with_frames(out)


def write_loss_log(state: ModelState, path: str) -> None:
    """Write the loss log as JSON lines ``{step, tsc, mae, prc, idt, pkc, total}``."""
    with open(path, 'w', encoding='utf-8') as f:
        for record in state.loss_log:
            f.write(json.dumps(record) + '\n')


def read_loss_log(path: str) -> List[Dict[str, float]]:
    with open(path, 'r', encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


__all__ = [
    'STAGES',
    'NORMALIZATION',
    'TrainConfig',
    'ModelState',
    'PatchIndex',
    'peak_scale',
    'sample_patch',
    'train_denoiser',
    'train_prc',
    'fine_tune_joint',
    'apply_pipeline',
    'write_loss_log',
    'read_loss_log',
]
