#!/usr/bin/env python3
"""
pipeline.py
-----------

Stage runner for the Rb-82 denoising and positron-range-correction
toolkit.  A run is a list of named stages executed in order against one
results directory:

    simulate-kernel -> factorize -> phantom -> train-denoise -> train-prc
    -> train-joint -> apply -> prc-rl -> fit -> idif-compare -> report

Stages communicate only through artefacts on disk, so any stage can be
re-run on its own (see ``cli.py``).  Before anything is computed every
selected stage is checked for its inputs; a missing file raises
:class:`StageError` naming the stage that needs it.  After the last stage
``manifest.json`` records the SHA-256 of every artefact and of the
configuration.  It holds no timestamps, so identical configurations and
seeds reproduce it byte for byte.

Results layout::

    config.json                       resolved configuration
    kernels/{rb82,f18,f18_to_rb82}.json
    phantom/<study>/                  truth, degraded, cb.csv, aif.csv, spec.json,
                                      fdg_like.json, masks/<label>.json
    models/<name>.json (+ .params)    checkpoints and <name>_loss.jsonl
    series/<study>/<variant>.json     processed series
    fit/<study>/<variant>/            parametric volumes and regional.json
    idif/<study>.json                 IDIF against AIF metrics
    report/                           tables and plot data

Example:

    cfg = PipelineConfig.load('my_run.yaml', seed=3)
    result = run_pipeline(cfg)
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import joblib  # type: ignore
import numpy as np

from audit_hash import MANIFEST_NAME, write_manifest
from deconv.factorize import FactorizeOptions, factorize_kernel
from deconv.richardson_lucy import RLOptions, richardson_lucy
from idif.metrics import compare
from kinetics.compartment import build_basis
from kinetics.fitting import VoxelFit, fit_parametric, fit_region, store_parametric
from kinetics.flow import mbf_map
from models.model_manager import get_checkpoint, store_checkpoint
from models.training import (
    ModelState,
    TrainConfig,
    apply_pipeline,
    fine_tune_joint,
    train_denoiser,
    train_prc,
    write_loss_log,
)
from phantom.generator import (
    BLOOD_POOL_LABEL,
    MYOCARDIUM_LABEL,
    RB82_HALF_LIFE_S,
    STUDY_MBF,
    NoiseModel,
    PhantomSpec,
    degrade,
    dense_input_function,
    fdg_like_image,
    make_phantom,
    phantom_masks,
    phantom_regions,
    write_phantom,
)
from physics.isotopes import decay_at
from physics.kernels import RangeKernel, load_kernel, simulate_kernel, store_kernel
from utils.config_loader import load_pipeline_config
from utils.errors import ConfigError, RbPetError, StageError
from utils.logging_utils import get_logger, log_elapsed
from utils.rng import derived_seed
from volume.core import (
    DynamicSeries,
    FrameSchedule,
    VoiMask,
    Volume3,
    extract_voi_tac,
    resample_aif_to_frames,
    static_frame,
)
from volume.io import load_series, load_volume, read_dense_csv, store_series, store_volume

logger = get_logger(__name__)

DEFAULT_STAGES = (
    'simulate-kernel',
    'factorize',
    'phantom',
    'train-denoise',
    'train-prc',
    'train-joint',
    'apply',
    'prc-rl',
    'fit',
    'idif-compare',
    'report',
)
VARIANTS = ('truth', 'input', 'denoised', 'denoised_prc', 'rl')
HEART_LABEL = 'heart'
REGION_LABELS = (MYOCARDIUM_LABEL, BLOOD_POOL_LABEL, HEART_LABEL)
RB82_SCHEDULE = [[20, 3.0], [6, 10.0], [12, 20.0]]

# Keys for derived_seed(seed, stream, index).
STREAM_KERNEL = 11
STREAM_NOISE = 12


@dataclass
class PipelineConfig:
    """Everything a run needs; sections are plain mappings parsed on validation.

    Raises
    ------
    ConfigError
        On unknown stages, variants, studies or regions, or on any
        section that its typed options class rejects.
    """

    stages: List[str] = field(default_factory=lambda: list(DEFAULT_STAGES))
    output_dir: str = 'results'
    seed: int = 0
    threads: int = 1
    studies: List[str] = field(default_factory=lambda: ['rest', 'stress'])
    variants: List[str] = field(default_factory=lambda: list(VARIANTS))
    regions: List[str] = field(default_factory=lambda: [MYOCARDIUM_LABEL])
    inputs: Dict[str, str] = field(default_factory=dict)
    schedule: List[List[float]] = field(default_factory=lambda: copy.deepcopy(RB82_SCHEDULE))
    kernel: Dict[str, Any] = field(default_factory=dict)
    factorize: Dict[str, Any] = field(default_factory=dict)
    phantom: Dict[str, Any] = field(default_factory=dict)
    noise: Dict[str, Any] = field(default_factory=dict)
    static_window_s: List[float] = field(default_factory=lambda: [120.0, 360.0])
    training: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    rl: Dict[str, Any] = field(default_factory=dict)
    fit: Dict[str, Any] = field(default_factory=dict)
    report: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.stages = [str(s) for s in self.stages]
        unknown = [s for s in self.stages if s not in STAGE_MAP]
        if unknown:
            raise ConfigError(f'unknown stages {unknown}; choose from {list(DEFAULT_STAGES)}')
        bad_variants = [v for v in self.variants if v not in VARIANTS]
        if bad_variants:
            raise ConfigError(f'unknown variants {bad_variants}; choose from {list(VARIANTS)}')
        bad_regions = [r for r in self.regions if r not in REGION_LABELS]
        if bad_regions:
            raise ConfigError(f'unknown regions {bad_regions}; choose from {list(REGION_LABELS)}')
        if not self.studies or len(set(self.studies)) != len(self.studies):
            raise ConfigError(f'studies must be a non-empty list of unique names: {self.studies}')
        if int(self.seed) < 0:
            raise ConfigError(f'seed must be non-negative, got {self.seed}')
        if int(self.threads) == 0:
            raise ConfigError('threads must be non-zero (-1 uses every core)')
        self.seed, self.threads = int(self.seed), int(self.threads)
        if len(self.static_window_s) != 2:
            raise ConfigError('static_window_s must be [start_s, end_s]')
        try:
            for study in self.studies:
                self.phantom_spec(study)
            self.frame_schedule()
            self.noise_model()
            FactorizeOptions.from_dict(self.factorize)
            RLOptions.from_dict(self.rl)
            for stage in ('denoise', 'prc', 'joint'):
                self.train_config(stage)
            self.k2_grid()
        except RbPetError as exc:
            raise ConfigError(str(exc)) from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(f'invalid pipeline configuration: {exc}') from exc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any] | None) -> 'PipelineConfig':
        d = copy.deepcopy(dict(doc or {}))
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError(f'unknown configuration keys: {unknown}')
        for key in ('kernel', 'factorize', 'phantom', 'noise', 'training', 'rl', 'fit',
                    'report', 'inputs'):
            if d.get(key) is None:
                d.pop(key, None)
        return cls(**d)

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(asdict(self))

    @classmethod
    def load(cls, path: Optional[str] = None, seed: Optional[int] = None,
             threads: Optional[int] = None, output_dir: Optional[str] = None) -> 'PipelineConfig':
        """Packaged defaults, then ``path``, then environment, then explicit arguments."""
        doc = load_pipeline_config(path)
        if seed is not None:
            doc['seed'] = seed
        if threads is not None:
            doc['threads'] = threads
        if output_dir is not None:
            doc['output_dir'] = output_dir
        return cls.from_dict(doc)

    def frame_schedule(self) -> FrameSchedule:
        return FrameSchedule.from_durations([(int(c), float(d)) for c, d in self.schedule])

    def study_mbf(self) -> Dict[str, float]:
        return {**STUDY_MBF, **dict(self.phantom.get('study_mbf') or {})}

    def phantom_spec(self, study: str) -> PhantomSpec:
        flows = self.study_mbf()
        if study not in flows:
            raise ConfigError(f'no MBF known for study {study!r}; add phantom.study_mbf.{study}')
        doc = {k: v for k, v in self.phantom.items() if k != 'study_mbf'}
        doc.setdefault('seed', self.seed)
        return PhantomSpec.from_dict(doc).with_mbf(float(flows[study]))

    def noise_model(self) -> NoiseModel:
        return NoiseModel.from_dict(self.noise)

    def train_config(self, stage: str) -> TrainConfig:
        doc = dict(self.training.get(stage) or {})
        doc.setdefault('seed', self.seed)
        doc['stage'] = stage
        return TrainConfig.from_dict(doc)

    def k2_grid(self) -> np.ndarray:
        explicit = self.fit.get('k2_grid')
        if explicit:
            return np.asarray(explicit, dtype=np.float64)
        return np.geomspace(float(self.fit.get('k2_min', 0.01)), float(self.fit.get('k2_max', 6.0)),
                            int(self.fit.get('k2_count', 100)))

    @property
    def joint(self) -> bool:
        """Apply the jointly fine-tuned models when the run includes ``train-joint``."""
        return 'train-joint' in self.stages

    @property
    def network_variants(self) -> List[str]:
        wanted = set(self.variants)
        out = []
        if wanted & {'denoised', 'rl'}:
            out.append('denoised')
        if 'denoised_prc' in wanted:
            out.append('denoised_prc')
        return out


@dataclass(frozen=True)
class RunPaths:
    """Where every artefact of a run lives; ``inputs`` overrides read locations."""

    root: str
    inputs: Mapping[str, str] = field(default_factory=dict)

    def _join(self, *parts: str) -> str:
        return os.path.join(self.root, *parts)

    @property
    def config(self) -> str:
        return self._join('config.json')

    @property
    def manifest(self) -> str:
        return self._join(MANIFEST_NAME)

    @property
    def report_dir(self) -> str:
        return self._join('report')

    def kernel_out(self, name: str) -> str:
        return self._join('kernels', f'{name}.json')

    def kernel(self, name: str) -> str:
        return self.inputs.get(f'{name}_kernel') or self.kernel_out(name)

    def phantom_dir(self, study: str) -> str:
        return self._join('phantom', study)

    def phantom(self, study: str, name: str) -> str:
        return os.path.join(self.phantom_dir(study), f'{name}.json')

    def aif(self, study: str) -> str:
        return self.inputs.get(f'{study}_aif') or os.path.join(self.phantom_dir(study), 'aif.csv')

    def mask(self, study: str, label: str) -> str:
        return os.path.join(self.phantom_dir(study), 'masks', f'{label}.json')

    def model(self, name: str) -> str:
        return self._join('models', f'{name}.json')

    def loss_log(self, name: str) -> str:
        return self._join('models', f'{name}_loss.jsonl')

    def series(self, study: str, variant: str) -> str:
        if variant == 'truth':
            return self.phantom(study, 'truth')
        if variant == 'input':
            return self.phantom(study, 'degraded')
        return self._join('series', study, f'{variant}.json')

    def fit_dir(self, study: str, variant: str) -> str:
        return self._join('fit', study, variant)

    def regional(self, study: str, variant: str) -> str:
        return os.path.join(self.fit_dir(study, variant), 'regional.json')

    def idif(self, study: str) -> str:
        return self._join('idif', f'{study}.json')


@dataclass(frozen=True)
class Stage:
    name: str
    run: Callable[[PipelineConfig, RunPaths], None]
    needs: Callable[[PipelineConfig, RunPaths], List[str]]
    makes: Callable[[PipelineConfig, RunPaths], List[str]]


@dataclass(frozen=True)
class PipelineResult:
    stages: List[str]
    manifest: str
    report_dir: Optional[str] = None


# ---------------------------------------------------------------------------
# helpers


def _write_json(doc: Any, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write('\n')


def load_mask(path: str, label: str) -> VoiMask:
    return VoiMask(load_volume(path).data > 0.5, label)


def pooled_series(series: Sequence[DynamicSeries]) -> DynamicSeries:
    """Concatenate studies into one training pool with back-to-back schedules."""
    frames = []
    volumes: List[Volume3] = []
    offset = 0.0
    for s in series:
        frames.extend((a + offset, b + offset) for a, b in s.schedule.frames)
        volumes.extend(s.volumes)
        offset += float(s.schedule.ends[-1])
    return DynamicSeries(FrameSchedule(tuple(frames)), tuple(volumes))


def _fit_record(fit: VoxelFit) -> Dict[str, Any]:
    return {
        'K1': fit.params.K1,
        'k2': fit.params.k2,
        'Vb': fit.params.Vb,
        'MBF': float(mbf_map(np.array([fit.params.K1]))[0]),
        'residual': fit.residual,
        'blood': fit.blood,
    }


def _store_model(state: ModelState, name: str, paths: RunPaths, cfg: TrainConfig) -> None:
    store_checkpoint(state, paths.model(name), config=cfg.to_dict())
    write_loss_log(state, paths.loss_log(name))


def _model_names(cfg: PipelineConfig) -> Dict[str, str]:
    if cfg.joint:
        return {'denoiser': 'denoiser_joint', 'prc': 'prc_joint'}
    return {'denoiser': 'denoiser', 'prc': 'prc'}


# ---------------------------------------------------------------------------
# stages


def run_simulate_kernel(cfg: PipelineConfig, paths: RunPaths) -> None:
    """Simulate Rb-82 and F-18 kernels in the configured tissue on the phantom grid."""
    voxel = cfg.phantom_spec(cfg.studies[0]).voxel_size
    tissue = str(cfg.kernel.get('tissue', 'striated'))
    n = int(cfg.kernel.get('n', 20000))
    dims = cfg.kernel.get('dims')
    rb = simulate_kernel('rb82', tissue, n, derived_seed(cfg.seed, STREAM_KERNEL, 0),
                         voxel_size=voxel, dims=dims, n_jobs=cfg.threads)
    f18 = simulate_kernel('f18', tissue, n, derived_seed(cfg.seed, STREAM_KERNEL, 1),
                          voxel_size=voxel, dims=rb.dims, n_jobs=cfg.threads)
    store_kernel(rb, paths.kernel_out('rb82'))
    store_kernel(f18, paths.kernel_out('f18'))


def run_factorize(cfg: PipelineConfig, paths: RunPaths) -> None:
    """Solve ``h_f18 (x) K = h_rb82`` for the F-18 to Rb-82 kernel."""
    result = factorize_kernel(load_kernel(paths.kernel('f18')), load_kernel(paths.kernel('rb82')),
                              FactorizeOptions.from_dict(cfg.factorize))
    store_kernel(result.kernel, paths.kernel_out('f18_to_rb82'))


def run_phantom(cfg: PipelineConfig, paths: RunPaths) -> None:
    """Noise-free and degraded phantom per study plus masks and FDG-like labels."""
    rb = load_kernel(paths.kernel('rb82'))
    f18 = load_kernel(paths.kernel('f18'))
    schedule = cfg.frame_schedule()
    noise = cfg.noise_model()
    start_s, end_s = cfg.static_window_s
    for idx, study in enumerate(cfg.studies):
        spec = cfg.phantom_spec(study)
        truth, params, cb = make_phantom(spec, schedule)
        degraded = degrade(truth, rb, noise, seed=derived_seed(cfg.seed, STREAM_NOISE, idx),
                           n_jobs=cfg.threads)
        times, values = dense_input_function(spec.input_function, end_s=float(schedule.ends[-1]))
        if not spec.decay_corrected:
            values = values * decay_at(times, RB82_HALF_LIFE_S)
        write_phantom(paths.phantom_dir(study), truth, degraded, params, cb, (times, values), spec)
        fdg = fdg_like_image(static_frame(truth, start_s, end_s), f18)
        store_volume(fdg, paths.phantom(study, 'fdg_like'))
        masks = dict(phantom_masks(spec))
        regions = phantom_regions(spec)
        masks[HEART_LABEL] = VoiMask(regions['cavity'] | regions['myocardium'], HEART_LABEL)
        for label, mask in masks.items():
            store_volume(Volume3(mask.mask.astype(np.float64), spec.voxel_size),
                         paths.mask(study, label))


def _degraded(cfg: PipelineConfig, paths: RunPaths) -> List[DynamicSeries]:
    return [load_series(paths.phantom(study, 'degraded')) for study in cfg.studies]


def _fdg_like(cfg: PipelineConfig, paths: RunPaths) -> List[Volume3]:
    return [load_volume(paths.phantom(study, 'fdg_like')) for study in cfg.studies]


def run_train_denoise(cfg: PipelineConfig, paths: RunPaths) -> None:
    tcfg = cfg.train_config('denoise')
    state = train_denoiser(pooled_series(_degraded(cfg, paths)), tcfg)
    _store_model(state, 'denoiser', paths, tcfg)


def run_train_prc(cfg: PipelineConfig, paths: RunPaths) -> None:
    """Train the PRC model on the 2-6 min static images of the degraded studies."""
    tcfg = cfg.train_config('prc')
    start_s, end_s = cfg.static_window_s
    statics = [static_frame(s, start_s, end_s) for s in _degraded(cfg, paths)]
    state = train_prc(statics, load_kernel(paths.kernel('rb82')),
                      load_kernel(paths.kernel('f18_to_rb82')), _fdg_like(cfg, paths), tcfg)
    _store_model(state, 'prc', paths, tcfg)


def run_train_joint(cfg: PipelineConfig, paths: RunPaths) -> None:
    tcfg = cfg.train_config('joint')
    new_d, new_p = fine_tune_joint(
        pooled_series(_degraded(cfg, paths)),
        get_checkpoint(paths.model('denoiser')),
        get_checkpoint(paths.model('prc')),
        load_kernel(paths.kernel('rb82')),
        load_kernel(paths.kernel('f18_to_rb82')),
        _fdg_like(cfg, paths),
        tcfg,
    )
    _store_model(new_d, 'denoiser_joint', paths, tcfg)
    _store_model(new_p, 'prc_joint', paths, tcfg)


def run_apply(cfg: PipelineConfig, paths: RunPaths) -> None:
    """Denoised and denoised+PRC series for every study."""
    names = _model_names(cfg)
    wanted = cfg.network_variants
    if not wanted:
        logger.info('no network variants requested', extra={'stage': 'apply'})
        return
    denoiser = get_checkpoint(paths.model(names['denoiser']))
    prc = get_checkpoint(paths.model(names['prc'])) if 'denoised_prc' in wanted else None
    for study in cfg.studies:
        series = load_series(paths.phantom(study, 'degraded'))
        if 'denoised' in wanted:
            store_series(apply_pipeline(series, denoiser), paths.series(study, 'denoised'))
        if prc is not None:
            store_series(apply_pipeline(series, denoiser, prc),
                         paths.series(study, 'denoised_prc'))


def _rl_frame(vol: Volume3, kernel: RangeKernel, iters: int, opts: RLOptions) -> np.ndarray:
    return richardson_lucy(vol, kernel, iters, opts).data


def run_prc_rl(cfg: PipelineConfig, paths: RunPaths) -> None:
    """Richardson-Lucy baseline: deconvolve the denoised frames by the Rb-82 kernel."""
    if 'rl' not in cfg.variants:
        logger.info('rl variant not requested', extra={'stage': 'prc-rl'})
        return
    kernel = load_kernel(paths.kernel('rb82'))
    opts = RLOptions.from_dict(cfg.rl)
    iters = int(cfg.rl.get('iters', 10))
    for study in cfg.studies:
        src = load_series(paths.series(study, 'denoised'))
        frames = joblib.Parallel(n_jobs=cfg.threads)(
            joblib.delayed(_rl_frame)(vol, kernel, iters, opts) for vol in src.volumes
        )
        store_series(src.with_frames(frames), paths.series(study, 'rl'))


def run_fit(cfg: PipelineConfig, paths: RunPaths) -> None:
    """Voxelwise fits with the IDIF of each variant plus regional IDIF and AIF fits."""
    grid = cfg.k2_grid()
    chunk = int(cfg.fit.get('chunk_size', 512))
    mask_mode = str(cfg.fit.get('mask', HEART_LABEL))
    for study in cfg.studies:
        blood = load_mask(paths.mask(study, BLOOD_POOL_LABEL), BLOOD_POOL_LABEL)
        fit_mask = None if mask_mode == 'all' else load_mask(paths.mask(study, HEART_LABEL),
                                                             HEART_LABEL)
        regions = {r: load_mask(paths.mask(study, r), r) for r in cfg.regions}
        aif_t, aif_v = read_dense_csv(paths.aif(study))
        for variant in cfg.variants:
            series = load_series(paths.series(study, variant))
            cb = extract_voi_tac(series, blood)
            basis = build_basis(cb, grid)
            img = fit_parametric(series, cb, basis, mask=fit_mask, n_jobs=cfg.threads,
                                 chunk_size=chunk)
            store_parametric(img, paths.fit_dir(study, variant))
            aif_cb = resample_aif_to_frames(aif_t, aif_v, series.schedule)
            aif_basis = build_basis(aif_cb, grid)
            regional = {
                label: {
                    'idif': _fit_record(fit_region(series, cb, basis, mask)),
                    'aif': _fit_record(fit_region(series, aif_cb, aif_basis, mask)),
                    'voxels': mask.count,
                }
                for label, mask in regions.items()
            }
            _write_json(regional, paths.regional(study, variant))
            logger.info('%s/%s fitted', study, variant, extra={'stage': 'fit'})


def run_idif_compare(cfg: PipelineConfig, paths: RunPaths) -> None:
    for study in cfg.studies:
        blood = load_mask(paths.mask(study, BLOOD_POOL_LABEL), BLOOD_POOL_LABEL)
        aif_t, aif_v = read_dense_csv(paths.aif(study))
        out = {}
        for variant in cfg.variants:
            series = load_series(paths.series(study, variant))
            reference = resample_aif_to_frames(aif_t, aif_v, series.schedule)
            out[variant] = compare(extract_voi_tac(series, blood), reference).to_dict()
        _write_json(out, paths.idif(study))


def run_report(cfg: PipelineConfig, paths: RunPaths) -> None:
    from report import build_report

    build_report(paths.root, profile=str(cfg.report.get('profile', 'default')))


# ---------------------------------------------------------------------------
# stage inputs and outputs


def _per_study(cfg: PipelineConfig, fn: Callable[[str], str]) -> List[str]:
    return [fn(study) for study in cfg.studies]


def _phantom_files(cfg: PipelineConfig, paths: RunPaths) -> List[str]:
    out: List[str] = []
    for study in cfg.studies:
        out += [paths.phantom(study, n) for n in ('truth', 'degraded', 'fdg_like', 'spec')]
        out += [paths.mask(study, label) for label in REGION_LABELS]
        out.append(os.path.join(paths.phantom_dir(study), 'aif.csv'))
    return out


def _series_files(cfg: PipelineConfig, paths: RunPaths) -> List[str]:
    return [paths.series(s, v) for s in cfg.studies for v in cfg.variants]


def _mask_files(cfg: PipelineConfig, paths: RunPaths, labels: Sequence[str]) -> List[str]:
    return [paths.mask(s, label) for s in cfg.studies for label in labels]


def _fit_files(cfg: PipelineConfig, paths: RunPaths) -> List[str]:
    out = []
    for s in cfg.studies:
        for v in cfg.variants:
            out += [os.path.join(paths.fit_dir(s, v), f'{n}.json') for n in ('k1', 'k2', 'vb')]
            out.append(paths.regional(s, v))
    return out


def _train_inputs(cfg: PipelineConfig, paths: RunPaths) -> List[str]:
    return (_per_study(cfg, lambda s: paths.phantom(s, 'degraded'))
            + _per_study(cfg, lambda s: paths.phantom(s, 'fdg_like'))
            + [paths.kernel('rb82'), paths.kernel('f18_to_rb82')])


def _apply_needs(cfg: PipelineConfig, paths: RunPaths) -> List[str]:
    wanted = cfg.network_variants
    if not wanted:
        return []
    names = _model_names(cfg)
    out = _per_study(cfg, lambda s: paths.phantom(s, 'degraded'))
    out.append(paths.model(names['denoiser']))
    if 'denoised_prc' in wanted:
        out.append(paths.model(names['prc']))
    return out


STAGE_MAP: Dict[str, Stage] = {
    'simulate-kernel': Stage(
        'simulate-kernel', run_simulate_kernel,
        lambda c, p: [],
        lambda c, p: [p.kernel_out('rb82'), p.kernel_out('f18')],
    ),
    'factorize': Stage(
        'factorize', run_factorize,
        lambda c, p: [p.kernel('f18'), p.kernel('rb82')],
        lambda c, p: [p.kernel_out('f18_to_rb82')],
    ),
    'phantom': Stage(
        'phantom', run_phantom,
        lambda c, p: [p.kernel('rb82'), p.kernel('f18')],
        _phantom_files,
    ),
    'train-denoise': Stage(
        'train-denoise', run_train_denoise,
        lambda c, p: _per_study(c, lambda s: p.phantom(s, 'degraded')),
        lambda c, p: [p.model('denoiser')],
    ),
    'train-prc': Stage(
        'train-prc', run_train_prc, _train_inputs, lambda c, p: [p.model('prc')],
    ),
    'train-joint': Stage(
        'train-joint', run_train_joint,
        lambda c, p: _train_inputs(c, p) + [p.model('denoiser'), p.model('prc')],
        lambda c, p: [p.model('denoiser_joint'), p.model('prc_joint')],
    ),
    'apply': Stage(
        'apply', run_apply, _apply_needs,
        lambda c, p: [p.series(s, v) for s in c.studies for v in c.network_variants],
    ),
    'prc-rl': Stage(
        'prc-rl', run_prc_rl,
        lambda c, p: ([p.kernel('rb82')] + _per_study(c, lambda s: p.series(s, 'denoised'))
                      if 'rl' in c.variants else []),
        lambda c, p: _per_study(c, lambda s: p.series(s, 'rl')) if 'rl' in c.variants else [],
    ),
    'fit': Stage(
        'fit', run_fit,
        lambda c, p: (_series_files(c, p) + _per_study(c, p.aif)
                      + _mask_files(c, p, [BLOOD_POOL_LABEL, HEART_LABEL] + list(c.regions))),
        _fit_files,
    ),
    'idif-compare': Stage(
        'idif-compare', run_idif_compare,
        lambda c, p: (_series_files(c, p) + _per_study(c, p.aif)
                      + _mask_files(c, p, [BLOOD_POOL_LABEL])),
        lambda c, p: _per_study(c, p.idif),
    ),
    'report': Stage(
        'report', run_report,
        lambda c, p: _fit_files(c, p) + _per_study(c, p.idif),
        lambda c, p: [os.path.join(p.report_dir, 'sources.json')],
    ),
}


def preflight(cfg: PipelineConfig, paths: RunPaths, stages: Sequence[str]) -> None:
    """Check every selected stage's inputs before computing anything.

    An input is satisfied by an earlier selected stage or an existing file.

    Raises
    ------
    StageError
        Naming the first stage with a missing input.
    """
    available = set()
    for name in stages:
        stage = STAGE_MAP[name]
        for path in stage.needs(cfg, paths):
            key = os.path.abspath(path)
            if key not in available and not os.path.exists(path):
                raise StageError(name, f'missing input {path}')
        available.update(os.path.abspath(p) for p in stage.makes(cfg, paths))


def run_pipeline(cfg: PipelineConfig, stages: Optional[Sequence[str]] = None) -> PipelineResult:
    """Run ``stages`` (default: ``cfg.stages``) and write the manifest.

    Raises
    ------
    ConfigError
        If a stage name is unknown or a section is invalid.
    StageError
        If a stage input is missing or a stage fails.  Outputs of the
        stages that completed are kept.
    """
    selected = list(stages) if stages is not None else list(cfg.stages)
    unknown = [s for s in selected if s not in STAGE_MAP]
    if unknown:
        raise ConfigError(f'unknown stages {unknown}')
    paths = RunPaths(cfg.output_dir, dict(cfg.inputs))
    preflight(cfg, paths, selected)
    os.makedirs(paths.root, exist_ok=True)
    _write_json(cfg.to_dict(), paths.config)
    completed: List[str] = []
    for name in selected:
        logger.info('stage %s', name, extra={'stage': name})
        try:
            with log_elapsed(logger, f'stage {name}'):
                STAGE_MAP[name].run(cfg, paths)
        except (ConfigError, StageError):
            raise
        except (RbPetError, ValueError, ArithmeticError, OSError) as exc:
            logger.error('stage %s failed: %s', name, exc, extra={'stage': name})
            raise StageError(name, str(exc)) from exc
        completed.append(name)
    manifest = write_manifest(paths.root, config=cfg.to_dict())
    report_dir = paths.report_dir if 'report' in completed else None
    return PipelineResult(completed, manifest, report_dir)


__all__ = [
    'DEFAULT_STAGES',
    'VARIANTS',
    'PipelineConfig',
    'RunPaths',
    'Stage',
    'STAGE_MAP',
    'PipelineResult',
    'load_mask',
    'pooled_series',
    'preflight',
    'run_pipeline',
]
