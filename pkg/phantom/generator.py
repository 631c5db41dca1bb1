"""
generator.py
------------

Synthetic dynamic cardiac phantom with known kinetics.

Geometry (all distances in mm, centred in the grid):

* an ellipsoidal left-ventricular cavity filled with blood (``Vb = 1``);
* a myocardial shell of fixed thickness around it with one-tissue
  kinetics derived from a true MBF through the Renkin-Crone model;
* background tissue everywhere else.

The blood input is a gamma variate ``A (t - t0)^alpha exp(-(t - t0)/beta)``
whose frame averages are evaluated in closed form with the regularised
incomplete gamma function.  ``degrade`` blurs every frame with a
positron range kernel and adds Gaussian noise whose SD follows

    SD = sqrt(scale * max(blurred, 0) * 2^(-t_mid / T_half) / duration^exponent)

from a per-frame random stream, so the output depends only on the seed.
The noise is zero-mean, so noisy voxels may go negative as in
reconstructed PET; clamping at zero is opt-in (``nonnegative=True``) and
biases low-activity regions upwards.

Example:

    spec = PhantomSpec.for_study('stress')
    truth, params, cb = make_phantom(spec, FrameSchedule.rb82_default())
    noisy = degrade(truth, rb_kernel, NoiseModel(), seed=3)
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, Mapping, Optional, Tuple

import joblib  # type: ignore
import numpy as np
from scipy.special import gamma as gamma_fn  # type: ignore
from scipy.special import gammainc  # type: ignore

from deconv.convolution import ConvSpec, convolve3
from kinetics.compartment import KineticParams, tac_model
from kinetics.fitting import ParametricImage
from kinetics.flow import renkin_crone_forward
from physics.isotopes import decay_at, decay_factor
from physics.kernels import RangeKernel
from utils.errors import GeometryError
from utils.logging_utils import get_logger
from utils.rng import derived_rng
from volume.core import DynamicSeries, FrameSchedule, TimeActivityCurve, VoiMask, Volume3
from volume.io import store_series, store_volume, write_dense_csv, write_tac_csv

logger = get_logger(__name__)

RB82_HALF_LIFE_S = 75.0
BLOOD_POOL_LABEL = 'lv-blood-pool'
MYOCARDIUM_LABEL = 'myocardium'
STUDY_MBF = {'rest': 1.0, 'stress': 2.5}


@dataclass(frozen=True)
class GammaVariate:
    """Blood input ``A (t - t0)^alpha exp(-(t - t0) / beta)`` in Bq/ml, times in s."""

    amplitude: float = 1500.0
    alpha: float = 1.5
    beta_s: float = 30.0
    t0_s: float = 5.0

    def __post_init__(self) -> None:
        if self.amplitude < 0 or self.alpha <= 0 or self.beta_s <= 0:
            raise ValueError('gamma variate needs amplitude >= 0, alpha > 0 and beta > 0')

    def value(self, t_s: np.ndarray | float) -> np.ndarray:
        s = np.clip(np.asarray(t_s, dtype=np.float64) - self.t0_s, 0.0, None)
        return self.amplitude * s ** self.alpha * np.exp(-s / self.beta_s)

    def integral(self, t_s: np.ndarray | float) -> np.ndarray:
        """Integral of :meth:`value` from ``t0`` to ``t``."""
        s = np.clip(np.asarray(t_s, dtype=np.float64) - self.t0_s, 0.0, None)
        k = self.alpha + 1.0
        return self.amplitude * self.beta_s ** k * gamma_fn(k) * gammainc(k, s / self.beta_s)

    def frame_average(self, schedule: FrameSchedule) -> np.ndarray:
        return (self.integral(schedule.ends) - self.integral(schedule.starts)) / schedule.durations


@dataclass(frozen=True)
class NoiseModel:
    """Frame noise law.  The default scale leaves a few percent noise on
    3 s frames at the blood peak and less on later, longer frames."""

    variance_scale: float = 100.0
    half_life_s: float = RB82_HALF_LIFE_S
    duration_exponent: float = 1.0
    nonnegative: bool = False

    def __post_init__(self) -> None:
        if self.half_life_s <= 0:
            raise ValueError(f'half-life must be positive, got {self.half_life_s}')
        if self.variance_scale < 0:
            raise ValueError(f'variance scale must be nonnegative, got {self.variance_scale}')

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any] | None) -> 'NoiseModel':
        return cls(**dict(doc or {}))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def frame_sd_factor(self, start_s: float, end_s: float) -> float:
        """SD per unit sqrt(activity) for a frame."""
        mid = 0.5 * (start_s + end_s)
        duration = end_s - start_s
        return float(np.sqrt(self.variance_scale * decay_at(mid, self.half_life_s)
                             / duration ** self.duration_exponent))


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (64, 64, 32)
    voxel_size: Tuple[float, float, float] = (2.0, 2.0, 2.0)
    cavity_radii_mm: Tuple[float, float, float] = (16.0, 16.0, 18.0)
    shell_thickness_mm: float = 10.0
    mbf: float = 1.0
    myocardium_k2: float = 0.25
    myocardium_vb: float = 0.3
    myocardium: Optional[KineticParams] = None
    background: KineticParams = field(default_factory=lambda: KineticParams(0.1, 0.2, 0.05))
    input_function: GammaVariate = field(default_factory=GammaVariate)
    decay_corrected: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.shell_thickness_mm <= 0:
            raise ValueError('myocardial shell thickness must be positive')
        if min(self.cavity_radii_mm) <= 0 or min(self.voxel_size) <= 0 or min(self.dims) <= 0:
            raise ValueError('radii, voxel sizes and dims must be positive')
        object.__setattr__(self, 'dims', tuple(int(d) for d in self.dims))
        object.__setattr__(self, 'voxel_size', tuple(float(v) for v in self.voxel_size))
        object.__setattr__(self, 'cavity_radii_mm', tuple(float(r) for r in self.cavity_radii_mm))

    def myocardium_params(self) -> KineticParams:
        if self.myocardium is not None:
            return self.myocardium
        return KineticParams(renkin_crone_forward(self.mbf), self.myocardium_k2,
                             self.myocardium_vb)

    @classmethod
    def for_study(cls, study: str, **overrides: Any) -> 'PhantomSpec':
        """Phantom for a ``rest`` or ``stress`` study."""
        if study not in STUDY_MBF:
            raise ValueError(f'study must be one of {sorted(STUDY_MBF)}, got {study!r}')
        return cls(**{'mbf': STUDY_MBF[study], **overrides})

    def with_mbf(self, mbf: float) -> 'PhantomSpec':
        return replace(self, mbf=mbf, myocardium=None)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any] | None) -> 'PhantomSpec':
        d = dict(doc or {})
        if d.get('myocardium') is not None:
            d['myocardium'] = KineticParams(**d['myocardium'])
        if 'background' in d:
            d['background'] = KineticParams(**d['background'])
        if 'input_function' in d:
            d['input_function'] = GammaVariate(**d['input_function'])
        for key in ('dims', 'voxel_size', 'cavity_radii_mm'):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _ellipsoid_radius(spec: PhantomSpec, pad_mm: float = 0.0) -> np.ndarray:
    """Normalised ellipsoid radius of every voxel centre (1 on the surface)."""
    axes = []
    for n, dv in zip(spec.dims, spec.voxel_size):
        axes.append((np.arange(n) - (n - 1) / 2.0) * dv)
    x, y, z = np.meshgrid(*axes, indexing='ij')
    rx, ry, rz = (r + pad_mm for r in spec.cavity_radii_mm)
    return np.sqrt((x / rx) ** 2 + (y / ry) ** 2 + (z / rz) ** 2)


def _check_fits(spec: PhantomSpec) -> None:
    for n, dv, r in zip(spec.dims, spec.voxel_size, spec.cavity_radii_mm):
        if 2.0 * (r + spec.shell_thickness_mm) >= n * dv:
            raise GeometryError(
                f'phantom of outer radius {r + spec.shell_thickness_mm} mm does not fit '
                f'{n} voxels of {dv} mm'
            )


def phantom_regions(spec: PhantomSpec) -> Dict[str, np.ndarray]:
    """Boolean cavity, myocardium and background arrays (disjoint, covering the grid)."""
    _check_fits(spec)
    cavity = _ellipsoid_radius(spec) <= 1.0
    outer = _ellipsoid_radius(spec, spec.shell_thickness_mm) <= 1.0
    myocardium = outer & ~cavity
    return {'cavity': cavity, 'myocardium': myocardium, 'background': ~outer}


def phantom_masks(spec: PhantomSpec) -> Dict[str, VoiMask]:
    """VOIs used downstream: a cylindrical blood-pool core and the myocardium."""
    regions = phantom_regions(spec)
    axes = [(np.arange(n) - (n - 1) / 2.0) * dv for n, dv in zip(spec.dims, spec.voxel_size)]
    x, y, z = np.meshgrid(*axes, indexing='ij')
    rx, ry, rz = spec.cavity_radii_mm
    radius = 0.5 * min(rx, ry)
    core = (x ** 2 + y ** 2 <= radius ** 2) & (np.abs(z) <= 0.5 * rz) & regions['cavity']
    return {
        BLOOD_POOL_LABEL: VoiMask(core, BLOOD_POOL_LABEL),
        MYOCARDIUM_LABEL: VoiMask(regions['myocardium'], MYOCARDIUM_LABEL),
    }


def make_input_function(params: GammaVariate, schedule: FrameSchedule) -> TimeActivityCurve:
    """Frame-averaged gamma-variate blood curve (nonnegative)."""
    return TimeActivityCurve(schedule, np.maximum(params.frame_average(schedule), 0.0))


def dense_input_function(params: GammaVariate, end_s: float = 360.0,
                         step_s: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """Densely sampled arterial curve, as a blood sampler would record it."""
    times = np.arange(0.0, end_s, step_s)
    return times, params.value(times)


def make_phantom(spec: PhantomSpec, schedule: FrameSchedule
                 ) -> Tuple[DynamicSeries, ParametricImage, TimeActivityCurve]:
    """Noise-free phantom series, its true parametric images and the blood input.

    With ``spec.decay_corrected`` false the series values (and ``cb``)
    are multiplied by the frame-mean Rb-82 decay factor.

    Raises
    ------
    GeometryError
        If the myocardial shell does not fit in the grid.
    """
    regions = phantom_regions(spec)
    cb = make_input_function(spec.input_function, schedule)
    region_params = {
        'cavity': KineticParams(0.0, 0.0, 1.0),
        'myocardium': spec.myocardium_params(),
        'background': spec.background,
    }
    decay = np.ones(len(schedule))
    if not spec.decay_corrected:
        decay = decay_factor(schedule.starts, schedule.ends, RB82_HALF_LIFE_S)
    frames = np.zeros((len(schedule),) + spec.dims)
    k1 = np.zeros(spec.dims)
    k2 = np.zeros(spec.dims)
    vb = np.zeros(spec.dims)
    for name, params in region_params.items():
        sel = regions[name]
        tac = tac_model(params, cb).values * decay
        frames[:, sel] = tac[:, None]
        k1[sel], k2[sel], vb[sel] = params.K1, params.k2, params.Vb
    series = DynamicSeries.from_array(frames, spec.voxel_size, schedule)
    truth = ParametricImage(
        Volume3(k1, spec.voxel_size), Volume3(k2, spec.voxel_size),
        Volume3(vb, spec.voxel_size), Volume3.zeros(spec.dims, spec.voxel_size),
        {'source': 'phantom-truth', 'mbf': spec.mbf},
    )
    logger.info('phantom %s with MBF %.3g: myocardium %s', spec.dims, spec.mbf,
                region_params['myocardium'])
    if not spec.decay_corrected:
        cb = TimeActivityCurve(schedule, cb.values * decay)
    return series, truth, cb


def _degrade_frame(vol: Volume3, kernel: RangeKernel, noise: NoiseModel, start: float,
                   end: float, seed: int, frame: int, conv: ConvSpec) -> np.ndarray:
    blurred = convolve3(vol, kernel, conv).data
    if noise.variance_scale == 0:
        return np.array(blurred)
    rng = derived_rng(seed, frame)
    sd = noise.frame_sd_factor(start, end) * np.sqrt(np.maximum(blurred, 0.0))
    noisy = blurred + sd * rng.standard_normal(blurred.shape)
    return np.maximum(noisy, 0.0) if noise.nonnegative else noisy


def degrade(truth: DynamicSeries, kernel: RangeKernel, noise: NoiseModel | None = None,
            seed: int = 0, n_jobs: int = 1, conv: ConvSpec | None = None) -> DynamicSeries:
    """Blur every frame with ``kernel`` and add frame-dependent Gaussian noise.

    Frame ``f`` draws from the stream ``(seed, f)``, so the result does not
    depend on ``n_jobs``.
    """
    noise = noise or NoiseModel()
    conv = conv or ConvSpec(padding='reflect', backend='fft')
    frames = joblib.Parallel(n_jobs=n_jobs)(
        joblib.delayed(_degrade_frame)(vol, kernel, noise, s, e, seed, f, conv)
        for f, (vol, (s, e)) in enumerate(zip(truth.volumes, truth.schedule.frames))
    )
    return truth.with_frames(frames)


def fdg_like_image(static_truth: Volume3, f18_kernel: RangeKernel,
                   conv: ConvSpec | None = None) -> Volume3:
    """A low-range pseudo-label image: the true static image blurred by the F-18 kernel."""
    return convolve3(static_truth, f18_kernel, conv or ConvSpec(padding='reflect'))


def write_phantom(out_dir: str, truth: DynamicSeries, degraded: DynamicSeries,
                  params: ParametricImage, cb: TimeActivityCurve,
                  dense_aif: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                  spec: Optional[PhantomSpec] = None) -> Dict[str, str]:
    """Write truth and degraded series, ``cb.csv`` and the true parametric volumes."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        'truth': os.path.join(out_dir, 'truth.json'),
        'degraded': os.path.join(out_dir, 'degraded.json'),
        'cb': os.path.join(out_dir, 'cb.csv'),
    }
    store_series(truth, paths['truth'])
    store_series(degraded, paths['degraded'])
    write_tac_csv(cb, paths['cb'])
    for name in ('k1', 'k2', 'vb'):
        paths[f'true_{name}'] = os.path.join(out_dir, f'true_{name}.json')
        store_volume(getattr(params, name), paths[f'true_{name}'])
    if dense_aif is not None:
        paths['aif'] = os.path.join(out_dir, 'aif.csv')
        write_dense_csv(dense_aif[0], dense_aif[1], paths['aif'])
    if spec is not None:
        paths['spec'] = os.path.join(out_dir, 'spec.json')
        with open(paths['spec'], 'w', encoding='utf-8') as f:
            json.dump(spec.to_dict(), f, indent=2, sort_keys=True)
    return paths


def load_phantom_spec(path: str) -> PhantomSpec:
    with open(path, 'r', encoding='utf-8') as f:
        return PhantomSpec.from_dict(json.load(f))


__all__ = [
    'BLOOD_POOL_LABEL',
    'MYOCARDIUM_LABEL',
    'STUDY_MBF',
    'GammaVariate',
    'NoiseModel',
    'PhantomSpec',
    'phantom_regions',
    'phantom_masks',
    'make_input_function',
    'dense_input_function',
    'make_phantom',
    'degrade',
    'fdg_like_image',
    'write_phantom',
    'load_phantom_spec',
]
