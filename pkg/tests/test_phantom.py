"""Tests for the synthetic cardiac phantom."""
import numpy as np
import pytest

from kinetics.compartment import tac_model
from kinetics.flow import renkin_crone_forward
from physics.isotopes import decay_factor
from physics.kernels import delta_kernel, gaussian_kernel
from phantom.generator import (
    BLOOD_POOL_LABEL,
    MYOCARDIUM_LABEL,
    GammaVariate,
    NoiseModel,
    PhantomSpec,
    degrade,
    dense_input_function,
    fdg_like_image,
    load_phantom_spec,
    make_phantom,
    phantom_masks,
    phantom_regions,
    write_phantom,
)
from utils.errors import GeometryError
from volume.core import DynamicSeries, FrameSchedule

SCHEDULE = FrameSchedule.from_durations([(4, 15.0), (4, 30.0), (3, 40.0)])
VOXEL = (2.0, 2.0, 2.0)


def _spec(**overrides):
    base = dict(dims=(24, 24, 16), voxel_size=VOXEL, cavity_radii_mm=(6.0, 6.0, 8.0),
                shell_thickness_mm=4.0)
    base.update(overrides)
    return PhantomSpec.for_study('rest', **base)


def test_gamma_variate_frame_average_matches_quadrature():
    """Closed-form frame averages agree with dense numerical integration."""
    gv = GammaVariate()
    got = gv.frame_average(SCHEDULE)
    for f, (s, e) in enumerate(SCHEDULE.frames):
        t = np.linspace(s, e, 20001)
        assert got[f] == pytest.approx(np.trapz(gv.value(t), t) / (e - s), rel=1e-5)
    assert gv.value(gv.t0_s - 1.0) == 0.0


def test_dense_input_function_sampling():
    """The dense curve is sampled every step up to the end time."""
    times, values = dense_input_function(GammaVariate(), end_s=10.0, step_s=0.5)
    assert times.size == 20 and times[-1] == 9.5
    assert values.shape == times.shape


def test_regions_partition_the_grid():
    """Cavity, myocardium and background are disjoint and cover the grid."""
    regions = phantom_regions(_spec())
    total = sum(r.astype(int) for r in regions.values())
    assert np.all(total == 1)
    assert all(r.any() for r in regions.values())


def test_masks_sit_inside_their_regions():
    """The blood-pool core lies inside the cavity; the myocardium mask is the shell."""
    spec = _spec()
    regions = phantom_regions(spec)
    masks = phantom_masks(spec)
    assert not np.any(masks[BLOOD_POOL_LABEL].mask & ~regions['cavity'])
    assert np.array_equal(masks[MYOCARDIUM_LABEL].mask, regions['myocardium'])


def test_phantom_too_large_for_grid():
    """A shell reaching the grid border is a geometry error."""
    with pytest.raises(GeometryError):
        phantom_regions(_spec(dims=(10, 24, 16)))


def test_study_flow_and_spec_validation():
    """Studies set their MBF; unknown studies and bad geometry are rejected."""
    assert PhantomSpec.for_study('stress').mbf == 2.5
    assert _spec().myocardium_params().K1 == pytest.approx(renkin_crone_forward(1.0))
    with pytest.raises(ValueError):
        PhantomSpec.for_study('exercise')
    with pytest.raises(ValueError):
        _spec(shell_thickness_mm=0.0)


def test_make_phantom_region_curves():
    """Myocardial voxels follow the model TAC and cavity voxels follow the input."""
    spec = _spec()
    series, truth, cb = make_phantom(spec, SCHEDULE)
    regions = phantom_regions(spec)
    frames = series.as_array()
    myo = tac_model(spec.myocardium_params(), cb).values
    idx = tuple(np.argwhere(regions['myocardium'])[0])
    np.testing.assert_allclose(frames[(slice(None),) + idx], myo, rtol=1e-12)
    idx = tuple(np.argwhere(regions['cavity'])[0])
    np.testing.assert_allclose(frames[(slice(None),) + idx], cb.values, rtol=1e-12)
    assert np.all(truth.k1.data[regions['myocardium']] == spec.myocardium_params().K1)
    assert np.all(truth.vb.data[regions['cavity']] == 1.0)
    assert truth.report['mbf'] == 1.0


def test_phantom_without_decay_correction():
    """Uncorrected phantoms scale every frame and the input by the frame decay factor."""
    corrected, _, cb = make_phantom(_spec(), SCHEDULE)
    raw, _, cb_raw = make_phantom(_spec(decay_corrected=False), SCHEDULE)
    factor = decay_factor(SCHEDULE.starts, SCHEDULE.ends, 75.0)
    np.testing.assert_allclose(raw.as_array(), corrected.as_array() * factor[:, None, None, None],
                               rtol=1e-12)
    np.testing.assert_allclose(cb_raw.values, cb.values * factor, rtol=1e-12)


def test_noise_sd_factor():
    """The SD factor follows sqrt(scale * decay(t_mid) / duration)."""
    noise = NoiseModel(variance_scale=100.0)
    assert noise.frame_sd_factor(0.0, 150.0) == pytest.approx(np.sqrt(100.0 * 0.5 / 150.0))
    with pytest.raises(ValueError):
        NoiseModel(variance_scale=-1.0)


def test_degrade_without_noise_is_pure_blur():
    """Zero noise with a delta kernel returns the truth."""
    truth, _, _ = make_phantom(_spec(), SCHEDULE)
    out = degrade(truth, delta_kernel((3, 3, 3), VOXEL), NoiseModel(variance_scale=0.0))
    assert np.array_equal(out.as_array(), truth.as_array())


def test_degrade_is_seeded_and_unclamped():
    """Noise repeats per seed, ignores the worker count and may go negative."""
    truth, _, _ = make_phantom(_spec(), SCHEDULE)
    kernel = gaussian_kernel((3, 3, 3), 0.7, VOXEL)
    noise = NoiseModel(variance_scale=1.0e4)
    a = degrade(truth, kernel, noise, seed=3, n_jobs=1)
    b = degrade(truth, kernel, noise, seed=3, n_jobs=2)
    c = degrade(truth, kernel, noise, seed=4)
    assert np.array_equal(a.as_array(), b.as_array())
    assert not np.array_equal(a.as_array(), c.as_array())
    assert a.as_array().min() < 0.0
    assert a.schedule == truth.schedule
    clamped = degrade(truth, kernel, NoiseModel(variance_scale=1.0e4, nonnegative=True), seed=3)
    assert clamped.as_array().min() >= 0.0


def test_default_noise_is_unbiased_at_low_activity():
    """A uniform 5 Bq/ml volume keeps its mean under heavy noise unless clamped."""
    frames = np.full((1, 32, 32, 32), 5.0)
    truth = DynamicSeries.from_array(frames, VOXEL, FrameSchedule.from_durations([(1, 3.0)]))
    kernel = delta_kernel((3, 3, 3), VOXEL)
    noisy = degrade(truth, kernel, NoiseModel(variance_scale=1.0e4), seed=0).as_array()
    assert noisy.mean() == pytest.approx(5.0, abs=3.0)
    assert np.mean(noisy == 0.0) == 0.0
    clamped = degrade(truth, kernel, NoiseModel(variance_scale=1.0e4, nonnegative=True),
                      seed=0).as_array()
    assert clamped.mean() > 40.0
    assert 0.4 < np.mean(clamped == 0.0) < 0.6


def test_fdg_like_image_with_delta_kernel():
    """A delta F-18 kernel leaves the static truth unchanged."""
    truth, _, _ = make_phantom(_spec(), SCHEDULE)
    static = truth.volumes[-1]
    out = fdg_like_image(static, delta_kernel((3, 3, 3), VOXEL))
    assert np.array_equal(out.data, static.data)


def test_write_phantom_and_reload_spec(tmp_path):
    """The phantom directory holds series, input curves, true maps and the phantom spec."""
    spec = _spec()
    truth, params, cb = make_phantom(spec, SCHEDULE)
    paths = write_phantom(str(tmp_path), truth, truth, params, cb,
                          dense_input_function(spec.input_function, 300.0), spec)
    for key in ('truth', 'degraded', 'cb', 'aif', 'spec', 'true_k1', 'true_k2', 'true_vb'):
        assert (tmp_path / paths[key].split('/')[-1]).exists()
    assert load_phantom_spec(paths['spec']) == spec
