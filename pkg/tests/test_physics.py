"""Unit tests for positron transport and range kernels."""
import json

import numpy as np
import pytest

from physics.isotopes import decay_at, decay_factor, load_nuclear_data
from physics.kernels import (
    RangeKernel,
    auto_kernel_dims,
    build_kernel,
    delta_kernel,
    gaussian_kernel,
    kernel_moments,
    load_kernel,
    store_kernel,
    symmetrize_kernel,
)
from physics.transport import (
    AnnihilationCloud,
    mean_range,
    sample_beta_energy,
    simulate_positrons,
)
from utils.errors import ConfigError, DegenerateInputError, GeometryError
from utils.rng import derived_rng

VOXEL = (2.036, 2.036, 2.0)


@pytest.fixture(scope='module')
def data():
    return load_nuclear_data()


def test_unknown_isotope_is_config_error(data):
    """Isotope and tissue lookups name the known entries on failure."""
    with pytest.raises(ConfigError):
        data.isotope('c11')
    with pytest.raises(ConfigError):
        data.tissue('bone')


def test_beta_energy_support_and_determinism(data):
    """Draws lie strictly inside (0, endpoint) and repeat for one seed."""
    rb = data.isotope('rb82')
    a = sample_beta_energy(rb, derived_rng(5), size=20000)
    b = sample_beta_energy(rb, derived_rng(5), size=20000)
    assert np.array_equal(a, b)
    assert np.all(a > 0) and np.all(a < rb.endpoint_mev)


def test_beta_energy_mean_within_spectrum_bounds(data):
    """The mean Rb-82 energy lies between a quarter and a half of the endpoint."""
    rb = data.isotope('rb82')
    e = sample_beta_energy(rb, derived_rng(1), size=100000)
    assert rb.endpoint_mev / 4 < e.mean() < rb.endpoint_mev / 2


def test_zero_energy_cloud_sits_at_origin(data):
    """With the zero-energy hook every end point is the emission point."""
    cloud = simulate_positrons(data.isotope('rb82'), data.tissue('striated'), 500,
                               seed=0, energy_override=0.0)
    assert mean_range(cloud) == 0.0


def test_simulation_independent_of_workers(data):
    """Chunked streams give identical clouds for one and two workers."""
    iso, med = data.isotope('f18'), data.tissue('soft')
    n = data.transport.chunk_size + 1000
    a = simulate_positrons(iso, med, n, seed=3, n_jobs=1)
    b = simulate_positrons(iso, med, n, seed=3, n_jobs=2)
    assert np.array_equal(a.endpoints, b.endpoints)


def test_density_scaling_is_exact(data):
    """One seed in two tissues gives clouds scaled by the density ratio."""
    iso = data.isotope('rb82')
    lung, soft = data.tissue('lung'), data.tissue('soft')
    a = mean_range(simulate_positrons(iso, lung, 4000, seed=9))
    b = mean_range(simulate_positrons(iso, soft, 4000, seed=9))
    ratio = soft.effective_density(data.water_z_over_a) / lung.effective_density(
        data.water_z_over_a)
    assert a / b == pytest.approx(ratio, rel=1e-9)


def test_tissue_and_isotope_ordering(data):
    """Lung > soft tissue > striated muscle, and Rb-82 > F-18 everywhere."""
    ranges = {}
    for iso in ('f18', 'rb82'):
        for med in ('lung', 'soft', 'skeletal', 'striated'):
            cloud = simulate_positrons(data.isotope(iso), data.tissue(med), 5000, seed=2)
            ranges[iso, med] = mean_range(cloud)
    for iso in ('f18', 'rb82'):
        assert ranges[iso, 'lung'] > ranges[iso, 'soft'] > ranges[iso, 'striated']
        assert ranges[iso, 'skeletal'] >= ranges[iso, 'striated']
    for med in ('lung', 'soft', 'skeletal', 'striated'):
        assert ranges['rb82', med] > ranges['f18', med]


@pytest.mark.slow
def test_mean_ranges_at_full_sample_size(data):
    """Reference mean ranges, tissue ordering and kernel centring at 300000 positrons."""
    n = 300000
    rb = data.isotope('rb82')
    ranges = {}
    for med in ('lung', 'soft', 'skeletal', 'striated'):
        ranges[med] = mean_range(simulate_positrons(rb, data.tissue(med), n, seed=21))
    assert ranges['striated'] == pytest.approx(4.4852, rel=0.15)
    assert ranges['lung'] > ranges['soft'] > ranges['skeletal']
    assert ranges['skeletal'] == pytest.approx(ranges['striated'], rel=0.02)
    f18 = simulate_positrons(data.isotope('f18'), data.tissue('striated'), n, seed=21)
    assert mean_range(f18) == pytest.approx(0.5720, rel=0.15)

    cloud = simulate_positrons(rb, data.tissue('striated'), n, seed=22)
    kernel = build_kernel(cloud, VOXEL, auto_kernel_dims(cloud, VOXEL))
    first, _ = kernel_moments(kernel)
    assert np.all(np.abs(first) < 0.05)


def test_rb82_range_in_muscle_is_millimetres(data):
    """The Rb-82 mean range in striated muscle is a few millimetres."""
    cloud = simulate_positrons(data.isotope('rb82'), data.tissue('striated'), 20000, seed=4)
    assert 1.5 < mean_range(cloud) < 9.0


def test_mean_range_hand_value():
    """Two end points at distances 1 and 3 have mean range 2."""
    cloud = AnnihilationCloud(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -3.0]]))
    assert mean_range(cloud) == pytest.approx(2.0)


def test_empty_cloud_is_degenerate():
    """An empty cloud has no mean range."""
    with pytest.raises(DegenerateInputError):
        mean_range(AnnihilationCloud(np.zeros((0, 3))))


def test_origin_cloud_builds_delta_kernel():
    """End points at the origin deposit into the centre voxel only."""
    kernel = build_kernel(AnnihilationCloud(np.zeros((10, 3))), VOXEL, (5, 5, 5))
    assert kernel.is_delta()


def test_endpoint_on_voxel_centre():
    """An end point on a voxel centre puts all its mass in that voxel."""
    cloud = AnnihilationCloud(np.array([[2.036, 0.0, -2.0]]))
    kernel = build_kernel(cloud, VOXEL, (5, 5, 5))
    assert kernel.data[3, 2, 1] == pytest.approx(1.0)


def test_kernel_grid_too_small_reports_escape():
    """A grid losing more than 0.5 % of end points is rejected."""
    cloud = AnnihilationCloud(np.array([[0.0, 0.0, 0.0], [20.0, 0.0, 0.0]]))
    with pytest.raises(GeometryError, match='escape'):
        build_kernel(cloud, VOXEL, (3, 3, 3))


def test_simulated_kernel_properties(data):
    """Kernels are unit-sum, centred and close to mirror-symmetric once symmetrised."""
    cloud = simulate_positrons(data.isotope('rb82'), data.tissue('striated'), 20000, seed=11)
    dims = auto_kernel_dims(cloud, VOXEL)
    kernel = build_kernel(cloud, VOXEL, dims)
    assert kernel.data.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(kernel.data >= 0)
    first, _ = kernel_moments(kernel)
    assert np.all(np.abs(first) < 0.1)
    assert symmetrize_kernel(kernel).mirror_asymmetry() < 1e-12


def test_gaussian_kernel_moments():
    """A sampled Gaussian has the requested variance on a wide grid."""
    kernel = gaussian_kernel((21, 21, 21), 2.0)
    first, second = kernel_moments(kernel)
    np.testing.assert_allclose(first, 0.0, atol=1e-12)
    np.testing.assert_allclose(second, 4.0, rtol=1e-3)


def test_kernel_validation():
    """Even dims and negative mass are rejected."""
    with pytest.raises(GeometryError):
        delta_kernel((4, 5, 5), VOXEL)
    with pytest.raises(GeometryError):
        RangeKernel.from_array(np.zeros((3, 3, 3)), VOXEL)


def test_kernel_store_load_with_sidecar(tmp_path):
    """Kernels round-trip through disk with their provenance sidecar."""
    kernel = gaussian_kernel((7, 7, 7), 1.2, VOXEL)
    path = str(tmp_path / 'h.json')
    store_kernel(kernel, path)
    back = load_kernel(path)
    np.testing.assert_allclose(back.data, kernel.data, rtol=1e-6)
    with open(tmp_path / 'h.sidecar.json', 'r', encoding='utf-8') as f:
        sidecar = json.load(f)
    assert sidecar['kind'] == 'gaussian'
    assert back.meta['kind'] == 'gaussian'


def test_decay_helpers():
    """Point decay halves per half-life; the frame mean lies between its ends."""
    assert decay_at(75.0, 75.0) == pytest.approx(0.5)
    f = decay_factor(0.0, 75.0, 75.0)
    assert 0.5 < f < 1.0
    assert f == pytest.approx(0.5 / np.log(2.0), rel=1e-12)
