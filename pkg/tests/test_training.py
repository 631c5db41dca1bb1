"""Tests for training, application and checkpoints of the tiny models."""
import json

import numpy as np
import pytest

from models.model_manager import (
    get_checkpoint,
    load_checkpoint,
    reload_checkpoints,
    store_checkpoint,
)
from models.networks import Architecture
from models.training import (
    ModelState,
    TrainConfig,
    apply_pipeline,
    fine_tune_joint,
    read_loss_log,
    sample_patch,
    train_denoiser,
    train_prc,
    write_loss_log,
)
from physics.kernels import delta_kernel, gaussian_kernel
from utils.errors import GeometryError, NumericalError, VolumeFormatError
from utils.rng import derived_rng
from volume.core import DynamicSeries, FrameSchedule, Volume3

VOXEL = (2.0, 2.0, 2.0)
DIMS = (8, 8, 6)


def _series(n=3, seed=0):
    rng = np.random.default_rng(seed)
    frames = 5.0 + rng.random((n,) + DIMS)
    schedule = FrameSchedule.from_durations([(n, 10.0)])
    return DynamicSeries.from_array(frames, VOXEL, schedule)


def _static(seed=1):
    return Volume3(2.0 + np.random.default_rng(seed).random(DIMS), VOXEL)


def _small_cfg(stage, steps=2):
    return TrainConfig(stage=stage, steps_per_epoch=steps, patch=DIMS, prc_patch=DIMS,
                       width=3, prc_layers=3, M=2, log_every=0)


def test_train_config_validation():
    """Unknown stages and options are rejected; dicts round-trip."""
    with pytest.raises(ValueError):
        TrainConfig(stage='pretrain')
    with pytest.raises(ValueError):
        TrainConfig.from_dict({'stage': 'prc', 'momentum': 0.9})
    cfg = TrainConfig.from_dict({'stage': 'prc', 'prc_patch': [8, 8, 4]})
    assert cfg.prc_patch == (8, 8, 4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_sample_patch_prefers_nonzero_regions():
    """Patches with a zero majority are redrawn."""
    img = np.zeros((20, 20, 10))
    img[:14, :14, :] = 1.0
    for step in range(5):
        idx = sample_patch([img], (6, 6, 4), derived_rng(0, step))
        values = idx.take(img)
        assert np.count_nonzero(values == 0.0) * 2 <= values.size


def test_sample_patch_clips_to_image():
    """A patch larger than the image is clipped to the image dims."""
    idx = sample_patch([np.ones((4, 4, 4))], (8, 8, 8), derived_rng(1))
    assert idx.shape == (4, 4, 4)
    assert idx.corner == (0, 0, 0)


def test_prc_training_with_delta_kernels_keeps_identity():
    """With delta kernels the identity model has zero loss and zero gradients."""
    h = delta_kernel((3, 3, 3), VOXEL)
    state = train_prc([_static()], h, h, [_static(2)], _small_cfg('prc', steps=3))
    identity = ModelState.identity(state.arch, seed=0, with_teacher=False)
    for name, value in identity.student.items():
        np.testing.assert_array_equal(state.student[name], value)
    assert [r['total'] for r in state.loss_log] == [0.0, 0.0, 0.0]


def test_prc_training_rejects_kernel_grid_mismatch():
    """Kernels on another voxel size cannot train on the images."""
    h = delta_kernel((3, 3, 3), (1.0, 1.0, 1.0))
    with pytest.raises(GeometryError):
        train_prc([_static()], h, h, [_static(2)], _small_cfg('prc'))


def test_denoiser_training_is_deterministic():
    """Two runs with one seed give identical parameters and logs."""
    a = train_denoiser(_series(), _small_cfg('denoise'))
    b = train_denoiser(_series(), _small_cfg('denoise'))
    assert a.step == 2 and len(a.loss_log) == 2
    for name in a.student:
        assert np.array_equal(a.student[name], b.student[name])
        assert np.all(np.isfinite(a.student[name]))
    assert a.loss_log == b.loss_log
    assert a.voxel_size == VOXEL


def test_denoiser_training_records_trajectory_and_resumes():
    """Trajectories hold one snapshot per step; resuming continues the step count."""
    first = train_denoiser(_series(), _small_cfg('denoise'), record_trajectory=True)
    assert len(first.trajectory) == 2
    resumed = train_denoiser(_series(), _small_cfg('denoise', steps=1), initial_state=first)
    assert resumed.step == 3
    assert len(resumed.loss_log) == 3


def test_prc_training_with_blur_kernel_moves_parameters():
    """A real blur gives a nonzero reblur loss and changes the identity model."""
    x, y, _ = np.indices(DIMS, dtype=float)
    disk = np.where((x - 3.5) ** 2 + (y - 3.5) ** 2 <= 6.0, 10.0, 1.0)
    static = Volume3(disk, VOXEL)
    state = train_prc([static], gaussian_kernel((3, 3, 3), 0.8, VOXEL),
                      delta_kernel((3, 3, 3), VOXEL), [static], _small_cfg('prc', steps=3))
    assert state.loss_log[0]['prc'] > 0.0
    assert all(np.isfinite(r['total']) for r in state.loss_log)
    identity = ModelState.identity(state.arch, seed=0, with_teacher=False)
    assert any(not np.array_equal(state.student[k], v) for k, v in identity.student.items())


def test_joint_fine_tune_updates_both_models():
    """Joint fine-tuning advances both states and tags them as joint."""
    series = _series()
    h = delta_kernel((3, 3, 3), VOXEL)
    d = train_denoiser(series, _small_cfg('denoise'))
    p = train_prc([_static()], gaussian_kernel((3, 3, 3), 0.8, VOXEL), h, [_static(2)],
                  _small_cfg('prc'))
    new_d, new_p = fine_tune_joint(series, d, p, gaussian_kernel((3, 3, 3), 0.8, VOXEL), h,
                                   [_static(2)], _small_cfg('joint'))
    assert new_d.stage == new_p.stage == 'joint'
    assert new_d.step == new_p.step == 4
    assert new_d.teacher is not None and new_p.teacher is None


def test_apply_identity_models_preserves_series():
    """Identity models leave the frames and schedule unchanged."""
    series = _series()
    d = ModelState.identity(Architecture.denoiser(width=3))
    p = ModelState.identity(Architecture.prc(width=3, layers=3), with_teacher=False, stage='prc')
    out = apply_pipeline(series, d, p)
    assert out.schedule == series.schedule
    np.testing.assert_allclose(out.as_array(), series.as_array(), rtol=1e-12)
    assert np.array_equal(apply_pipeline(series).as_array(), series.as_array())


def test_apply_keeps_zero_frames_and_scales_with_the_frame():
    """An all-zero frame stays zero and scaling a frame scales the output."""
    rng = np.random.default_rng(4)
    arch = Architecture.prc(width=3, layers=3)
    state = ModelState.identity(arch, with_teacher=False, stage='prc')
    state.student = {k: v + rng.normal(0.0, 0.02, size=v.shape) for k, v in state.student.items()}
    frames = np.stack([np.zeros(DIMS), 1.0 + rng.random(DIMS)])
    series = DynamicSeries.from_array(frames, VOXEL, FrameSchedule.from_durations([(2, 10.0)]))
    scaled = DynamicSeries.from_array(frames * 250.0, VOXEL, series.schedule)
    out = apply_pipeline(series, None, state).as_array()
    assert not out[0].any()
    np.testing.assert_allclose(apply_pipeline(scaled, None, state).as_array(), out * 250.0,
                               rtol=1e-10)


def test_model_state_rejects_non_finite_teacher():
    """A NaN in the teacher copy is reported with its role and name."""
    state = ModelState.identity(Architecture.denoiser(width=3))
    teacher = {k: v.copy() for k, v in state.teacher.items()}
    teacher['l0.bias'][0] = np.nan
    with pytest.raises(NumericalError, match='teacher/l0.bias'):
        ModelState(state.arch, state.student, teacher)


def test_mask_fraction_must_leave_voxels():
    """A mask fraction of one leaves nothing for the teacher to see."""
    with pytest.raises(ValueError):
        TrainConfig(mask_fraction=1.0)


def test_apply_rejects_voxel_mismatch():
    """A model trained on another grid cannot be applied."""
    d = ModelState.identity(Architecture.denoiser(width=3))
    d.voxel_size = (1.0, 1.0, 1.0)
    with pytest.raises(GeometryError):
        apply_pipeline(_series(), d)


def test_loss_log_round_trip(tmp_path):
    """Loss logs are JSON lines with one record per step."""
    state = train_denoiser(_series(), _small_cfg('denoise'))
    path = str(tmp_path / 'loss.jsonl')
    write_loss_log(state, path)
    records = read_loss_log(path)
    assert [r['step'] for r in records] == [1, 2]
    assert records == state.loss_log


def test_checkpoint_round_trip_and_cache(tmp_path):
    """Checkpoints keep architecture, metadata and float32 parameters."""
    state = train_denoiser(_series(), _small_cfg('denoise'))
    path = str(tmp_path / 'denoiser.json')
    store_checkpoint(state, path, config={'steps': 2})
    back = load_checkpoint(path)
    assert back.arch == state.arch
    assert back.step == 2 and back.stage == 'denoise'
    assert back.voxel_size == VOXEL
    for name, value in state.student.items():
        np.testing.assert_array_equal(back.student[name], value.astype(np.float32))
    assert back.teacher is not None
    reload_checkpoints()
    assert get_checkpoint(path) is get_checkpoint(path)


def test_checkpoint_truncated_payload(tmp_path):
    """A payload shorter than the header promises is a format error."""
    state = ModelState.identity(Architecture.prc(width=2, layers=2), with_teacher=False)
    path = tmp_path / 'prc.json'
    store_checkpoint(state, str(path))
    payload = tmp_path / 'prc.params'
    payload.write_bytes(payload.read_bytes()[:-4])
    with pytest.raises(VolumeFormatError):
        load_checkpoint(str(path))


def test_checkpoint_with_other_normalisation_is_rejected(tmp_path):
    """Checkpoints written for another input normalisation do not load."""
    state = ModelState.identity(Architecture.prc(width=2, layers=2), with_teacher=False)
    path = tmp_path / 'prc.json'
    store_checkpoint(state, str(path))
    header = json.loads(path.read_text(encoding='utf-8'))
    header['normalization'] = 'global_max'
    path.write_text(json.dumps(header), encoding='utf-8')
    with pytest.raises(VolumeFormatError, match='normalisation'):
        load_checkpoint(str(path))
