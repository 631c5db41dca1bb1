"""Tests for the stage runner, its preflight checks and the manifest."""
import csv
import json
import os
from pathlib import Path

import numpy as np
import pytest

from audit_hash import verify_manifest
from kinetics.flow import renkin_crone_forward
from physics.kernels import delta_kernel, gaussian_kernel, store_kernel
from pipeline import STAGE_MAP, PipelineConfig, RunPaths, pooled_series, preflight, run_pipeline
from utils.errors import ConfigError, StageError
from volume.core import DynamicSeries, FrameSchedule

VOXEL = (2.0, 2.0, 2.0)
PHANTOM = {'dims': [24, 24, 16], 'voxel_size': list(VOXEL), 'cavity_radii_mm': [6.0, 6.0, 8.0],
           'shell_thickness_mm': 4.0}
SCHEDULE = [[4, 15.0], [4, 30.0], [3, 40.0]]


def _kernels(tmp_path, rb82=None, sub='inputs'):
    paths = {}
    for name, kernel in (('rb82', rb82 or delta_kernel((3, 3, 3), VOXEL)),
                         ('f18', delta_kernel((3, 3, 3), VOXEL))):
        path = str(tmp_path / sub / f'{name}.json')
        store_kernel(kernel, path)
        paths[f'{name}_kernel'] = path
    return paths


def _config(tmp_path, out='results', **overrides):
    doc = {
        'output_dir': str(tmp_path / out),
        'stages': ['phantom', 'fit', 'idif-compare', 'report'],
        'variants': ['truth', 'input'],
        'regions': ['myocardium'],
        'inputs': _kernels(tmp_path),
        'schedule': SCHEDULE,
        'phantom': PHANTOM,
        'noise': {'variance_scale': 0.0},
        'fit': {'k2_grid': [0.1, 0.25, 0.5]},
    }
    doc.update(overrides)
    return PipelineConfig.from_dict(doc)


def _read_csv(path):
    with open(path, newline='', encoding='utf-8') as f:
        return list(csv.DictReader(f))


@pytest.mark.slow
def test_noise_free_run_recovers_true_flow(tmp_path):
    """With delta kernels and no noise the fitted myocardial K1 and MFR match the truth."""
    cfg = _config(tmp_path)
    result = run_pipeline(cfg)
    assert result.stages == cfg.stages
    paths = RunPaths(cfg.output_dir)
    for study, mbf in (('rest', 1.0), ('stress', 2.5)):
        for variant in ('truth', 'input'):
            with open(paths.regional(study, variant), encoding='utf-8') as f:
                regional = json.load(f)
            fit = regional['myocardium']['idif']
            assert fit['K1'] == pytest.approx(renkin_crone_forward(mbf), rel=1e-4)
            assert fit['k2'] == 0.25
            assert fit['MBF'] == pytest.approx(mbf, rel=1e-3)
        with open(paths.idif(study), encoding='utf-8') as f:
            assert set(json.load(f)) == {'truth', 'input'}

    rows = _read_csv(os.path.join(result.report_dir, 'regional_summary.csv'))
    assert len(rows) == 4
    for row in rows:
        assert float(row['mfr']) == pytest.approx(2.5, rel=1e-3)
    with open(os.path.join(result.report_dir, 'acceptance.json'), encoding='utf-8') as f:
        assert json.load(f)['evaluated'] is False
    assert verify_manifest(cfg.output_dir) == []


def test_phantom_stage_is_reproducible(tmp_path):
    """Two runs with one seed write identical artefacts apart from the config."""
    kernels = _kernels(tmp_path, rb82=gaussian_kernel((3, 3, 3), 0.8, VOXEL), sub='blur')
    manifests = []
    for out in ('a', 'b'):
        cfg = _config(tmp_path, out=out, stages=['phantom'], inputs=kernels,
                      noise={'variance_scale': 50.0}, seed=4)
        with open(run_pipeline(cfg).manifest, encoding='utf-8') as f:
            files = json.load(f)['files']
        files.pop('config.json')
        manifests.append(files)
    assert manifests[0] == manifests[1]
    assert 'phantom/rest/degraded.json' in manifests[0]


def test_manifest_has_no_timestamps(tmp_path):
    """Re-running a stage list into one directory rewrites the same manifest bytes."""
    cfg = _config(tmp_path, stages=['phantom'])
    first = Path(run_pipeline(cfg).manifest).read_bytes()
    second = Path(run_pipeline(cfg).manifest).read_bytes()
    assert first == second


def test_preflight_names_stage_with_missing_input(tmp_path):
    """A missing kernel stops the run before anything is written."""
    cfg = _config(tmp_path, stages=['factorize'],
                  inputs={'rb82_kernel': str(tmp_path / 'nope.json')})
    with pytest.raises(StageError) as info:
        run_pipeline(cfg)
    assert info.value.stage == 'factorize'
    assert not os.path.exists(cfg.output_dir)


def test_preflight_accepts_outputs_of_earlier_stages(tmp_path):
    """Inputs made by an earlier selected stage count as available."""
    cfg = _config(tmp_path, inputs={})
    paths = RunPaths(cfg.output_dir)
    preflight(cfg, paths, ['simulate-kernel', 'factorize', 'phantom', 'fit'])
    with pytest.raises(StageError) as info:
        preflight(cfg, paths, ['fit'])
    assert info.value.stage == 'fit'


def test_stage_map_covers_default_stages():
    """Every default stage has a runner and declared inputs and outputs."""
    cfg = PipelineConfig()
    assert list(STAGE_MAP) == cfg.stages
    paths = RunPaths('results')
    for stage in STAGE_MAP.values():
        assert isinstance(stage.needs(cfg, paths), list)
        assert stage.makes(cfg, paths)


def test_config_rejects_unknown_keys_and_names():
    """Unknown keys, stages, variants and regions are configuration errors."""
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({'epochs': 3})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({'stages': ['phantom', 'render']})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({'variants': ['raw']})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({'regions': ['septum']})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({'training': {'denoise': {'momentum': 0.9}}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({'studies': ['exercise']})


def test_config_load_applies_environment(monkeypatch, tmp_path):
    """Environment seeds override the file; explicit arguments override both."""
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'seed': 1, 'threads': 2}))
    monkeypatch.setenv('RBPET_SEED', '9')
    assert PipelineConfig.load(str(path)).seed == 9
    cfg = PipelineConfig.load(str(path), seed=5, output_dir=str(tmp_path / 'out'))
    assert cfg.seed == 5 and cfg.threads == 2
    assert cfg.output_dir == str(tmp_path / 'out')


def test_k2_grid_and_network_variants():
    """The k2 grid is geometric by default; network variants follow the requested list."""
    cfg = PipelineConfig.from_dict({'fit': {'k2_min': 0.1, 'k2_max': 1.0, 'k2_count': 3},
                                    'variants': ['input', 'rl']})
    np.testing.assert_allclose(cfg.k2_grid(), [0.1, np.sqrt(0.1), 1.0])
    assert cfg.network_variants == ['denoised']
    assert not cfg.joint


def test_pooled_series_shifts_schedules():
    """Pooled studies follow each other in time."""
    sched = FrameSchedule.from_durations([(2, 10.0)])
    a = DynamicSeries.from_array(np.ones((2, 2, 2, 2)), VOXEL, sched)
    b = DynamicSeries.from_array(np.zeros((2, 2, 2, 2)), VOXEL, sched)
    pooled = pooled_series([a, b])
    assert pooled.schedule.frames == ((0.0, 10.0), (10.0, 20.0), (20.0, 30.0), (30.0, 40.0))
    assert len(pooled.volumes) == 4


@pytest.mark.slow
def test_full_stage_list_is_byte_reproducible(tmp_path):
    """Every default stage run twice into one directory rewrites the same manifest."""
    cfg = _config(
        tmp_path, stages=PipelineConfig().stages, inputs={},
        variants=['truth', 'input', 'denoised', 'denoised_prc', 'rl'],
        kernel={'tissue': 'striated', 'n': 5000, 'dims': None},
        factorize={'learning_rate': 0.01, 'max_iter': 200, 'mae_threshold': 1.0},
        noise={'variance_scale': 100.0},
        training={
            'denoise': {'steps_per_epoch': 2, 'patch': [12, 12, 8]},
            'prc': {'steps_per_epoch': 2, 'prc_patch': [24, 24, 16]},
            'joint': {'steps_per_epoch': 2, 'prc_patch': [24, 24, 16]},
        },
        rl={'iters': 2},
    )
    first = Path(run_pipeline(cfg).manifest).read_bytes()
    second = Path(run_pipeline(cfg).manifest).read_bytes()
    assert first == second
    files = json.loads(first)['files']
    assert 'models/prc.json' in files
    assert verify_manifest(cfg.output_dir) == []


@pytest.mark.slow
def test_default_run_passes_acceptance(tmp_path):
    """The packaged default configuration meets the default acceptance profile."""
    cfg = PipelineConfig.load(output_dir=str(tmp_path / 'results'))
    result = run_pipeline(cfg)
    with open(os.path.join(result.report_dir, 'acceptance.json'), encoding='utf-8') as f:
        acceptance = json.load(f)
    assert acceptance['evaluated'] is True
    assert acceptance['checks'] == {'frame_mse': True, 'mbf_error': True, 'idif_auc': True}
    assert acceptance['passed'] is True
