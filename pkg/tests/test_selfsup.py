"""Tests for masking, the EMA teacher, losses and dynamic convolution."""
import json

import numpy as np
import pytest

from models.layers import conv3d_forward
from physics.kernels import delta_kernel, gaussian_kernel
from selfsup.dynamic_conv import (
    AttentionTriple,
    attention_jacobian,
    attention_weights,
    dynamic_conv,
    dynamic_conv_backward,
    noise_encoding,
)
from selfsup.losses import (
    LossReport,
    consistency_loss,
    denoise_loss,
    mae,
    prc_losses,
    prc_terms,
)
from selfsup.masking import n2v_mask, random_mask
from selfsup.teacher import ema_update, teacher_pseudo_label, teacher_uncertainty
from utils.errors import DegenerateInputError, GeometryError
from volume.core import Volume3


def _mlp(rng, out, hidden=4):
    return {
        'w1': rng.uniform(0.1, 0.5, hidden),
        'b1': np.full(hidden, 0.5),
        'w2': rng.normal(size=(out, hidden)),
        'b2': rng.normal(size=out),
    }


def test_random_mask_exact_fraction_and_reproducible():
    """Patterns mask round(f * size) voxels and repeat per seed."""
    a = random_mask((10, 10, 10), 0.5, 3)
    b = random_mask((10, 10, 10), 0.5, 3)
    c = random_mask((10, 10, 10), 0.5, 4)
    assert a.masked_fraction == 0.5
    assert np.array_equal(a.mask, b.mask)
    assert not np.array_equal(a.mask, c.mask)


@pytest.mark.parametrize('fraction', [0.0, 1.0, -0.1])
def test_random_mask_rejects_fraction(fraction):
    """The mask fraction must lie strictly between 0 and 1."""
    with pytest.raises(ValueError):
        random_mask((4, 4, 4), fraction, 0)


def test_n2v_mask_zeroes_masked_voxels():
    """Masked voxels are zero and all others are untouched."""
    arr = np.random.default_rng(0).random((6, 6, 6)) + 1.0
    out, pattern = n2v_mask(arr, 0.5, seed=7)
    assert np.all(out[pattern.mask] == 0.0)
    assert np.array_equal(out[~pattern.mask], arr[~pattern.mask])


def test_n2v_mask_keeps_volume_type_and_substitutes():
    """Volumes stay volumes; substitution copies neighbour values."""
    vol = Volume3(np.full((5, 5, 5), 3.0), (2.0, 2.0, 2.0))
    out, pattern = n2v_mask(vol, 0.3, seed=1, substitute=True)
    assert isinstance(out, Volume3)
    assert out.voxel_size == vol.voxel_size
    assert np.all(out.data == 3.0)
    assert pattern.mask.sum() == round(0.3 * 125)


def test_ema_update_arrays_and_mappings():
    """EMA mixes teacher and student with weight alpha on the teacher."""
    assert ema_update(np.array([1.0]), np.array([0.0]), 0.99)[0] == pytest.approx(0.99)
    out = ema_update({'w': np.ones(2)}, {'w': np.zeros(2)}, alpha=1.0)
    np.testing.assert_array_equal(out['w'], np.ones(2))
    out = ema_update({'w': np.ones(2)}, {'w': np.zeros(2)}, alpha=0.0)
    np.testing.assert_array_equal(out['w'], np.zeros(2))


def test_ema_update_errors():
    """Bad alpha, differing keys and shape mismatches are rejected."""
    with pytest.raises(ValueError):
        ema_update(np.ones(2), np.ones(2), 1.5)
    with pytest.raises(GeometryError):
        ema_update({'a': np.ones(2)}, {'b': np.ones(2)})
    with pytest.raises(GeometryError):
        ema_update(np.ones(2), np.ones(3))


def test_pseudo_label_averages_masked_passes():
    """The pseudo-label is the mean of M passes over independent masks."""
    x = np.random.default_rng(2).random((6, 6, 4)) + 1.0
    mean, passes = teacher_pseudo_label(lambda a: a, x, M=4, seed=5)
    assert passes.shape == (4, 6, 6, 4)
    np.testing.assert_allclose(mean, passes.mean(axis=0), atol=1e-15)
    assert not np.array_equal(passes[0], passes[1])
    with pytest.raises(ValueError):
        teacher_pseudo_label(lambda a: a, x, M=0)


def test_uncertainty_normalised_and_zero_for_constant_model():
    """Identical passes give zero uncertainty; otherwise values lie in [0, 1)."""
    x = np.random.default_rng(3).random((5, 5, 5))
    mean, passes = teacher_pseudo_label(np.ones_like, x, M=3)
    assert not teacher_uncertainty(passes, mean).any()
    mean, passes = teacher_pseudo_label(lambda a: a, x, M=3)
    u = teacher_uncertainty(passes, mean)
    assert u.min() >= 0.0 and u.max() < 1.0
    with pytest.raises(ValueError):
        teacher_uncertainty(passes[:1], mean)


def test_consistency_reduces_to_mae_without_uncertainty():
    """With u = 0 the weighted consistency loss is the plain MAE."""
    rng = np.random.default_rng(4)
    a, b = rng.random((4, 4, 4)), rng.random((4, 4, 4))
    u = np.zeros_like(a)
    assert consistency_loss(a, b, u) == pytest.approx(mae(a, b), rel=1e-12)
    with pytest.raises(DegenerateInputError):
        consistency_loss(a, b, np.ones_like(a))


def test_denoise_loss_total():
    """The total is TSC + MAE identity with a zero adversarial term."""
    rng = np.random.default_rng(5)
    x, y_s, y_t = rng.random((3, 4, 4, 4))
    report = denoise_loss(x, y_s, y_t, np.zeros_like(x))
    assert report.adv == 0.0
    assert report.total == pytest.approx(report.tsc + report.mae_identity)
    with pytest.raises(GeometryError):
        denoise_loss(x, y_s, y_t, np.zeros((2, 2, 2)))


def test_prc_terms_vanish_for_identity_under_delta_kernel():
    """A delta kernel and y_prc = y_s give zero reblur and identity terms."""
    y = np.random.default_rng(6).random((6, 6, 6))
    h = delta_kernel((3, 3, 3), (1.0, 1.0, 1.0))
    prc, idt, d_prc, d_s = prc_terms(y, y.copy(), h)
    assert prc == 0.0 and idt == 0.0
    assert not d_prc.any() and not d_s.any()
    report = prc_losses(y, y.copy(), h, y, h)
    assert report.total == 0.0


def test_reblur_term_has_no_border_residual_on_constant_images():
    """A constant image reblurs onto itself up to the border, so the term is zero."""
    y = np.full((10, 9, 8), 0.4)
    h = gaussian_kernel((5, 5, 5), 1.2, (1.0, 1.0, 1.0))
    prc, idt, _, _ = prc_terms(y, y.copy(), h)
    assert prc == pytest.approx(0.0, abs=1e-12)
    assert idt == 0.0


def test_prc_terms_gradient_matches_differences():
    """The reblur and identity gradient with respect to y_prc matches central differences."""
    rng = np.random.default_rng(8)
    y_s = rng.random((7, 6, 6))
    y_prc = rng.random((7, 6, 6))
    h = gaussian_kernel((3, 3, 3), 0.9, (1.0, 1.0, 1.0))
    _, _, d_prc, _ = prc_terms(y_s, y_prc, h, lambda_b=0.5)

    def total(arr):
        prc, idt, _, _ = prc_terms(y_s, arr, h, lambda_b=0.5)
        return prc + 0.5 * idt

    step = 1e-7
    for voxel in [(0, 0, 0), (3, 2, 4), (6, 5, 5)]:
        bump = np.zeros_like(y_prc)
        bump[voxel] = step
        fd = (total(y_prc + bump) - total(y_prc - bump)) / (2 * step)
        assert d_prc[voxel] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_loss_report_merge_and_json():
    """Merged reports add their terms and serialise one JSON object per line."""
    a = LossReport(tsc=1.0, mae_identity=0.5, total=1.5)
    b = LossReport(prc=0.2, idt=0.4, pkc=0.1, total=0.5)
    merged = a.merged(b)
    assert merged.total == pytest.approx(1.0 + 0.5 + 0.2 + 0.5 * 0.4 + 0.1)
    record = json.loads(merged.to_json_line(7))
    assert record['step'] == 7
    assert set(record) == {'step', 'tsc', 'mae', 'prc', 'idt', 'pkc', 'total'}


def test_noise_encoding_zero_volume_and_range():
    """An all-zero frame encodes to sin(0) + cos(0); any frame stays in [-2, 2]."""
    assert noise_encoding(np.zeros((3, 3, 3))).value == pytest.approx(1.0)
    enc = noise_encoding(np.random.default_rng(7).random((6, 6, 6)) * 50.0)
    assert -2.0 <= enc.value <= 2.0


def test_dynamic_conv_with_unit_attention_is_plain_conv():
    """With every attention equal to 1 the modulated layer is an ordinary convolution."""
    rng = np.random.default_rng(8)
    f = rng.random((2, 5, 5, 5))
    w = rng.normal(size=(3, 3, 3, 2, 3))
    b = rng.normal(size=3)
    att = AttentionTriple.constant(3, 2, 3)
    np.testing.assert_allclose(dynamic_conv(f, w, b, att), conv3d_forward(f, w, b), atol=1e-12)


def test_dynamic_conv_rejects_mismatched_attention():
    """Attention shapes must match the kernel."""
    with pytest.raises(GeometryError):
        dynamic_conv(np.ones((2, 4, 4, 4)), np.ones((3, 3, 3, 2, 2)), np.zeros(2),
                     AttentionTriple.constant(3, 1, 2))


def test_attention_jacobian_matches_finite_difference():
    """The analytic encoding derivative agrees with central differences."""
    rng = np.random.default_rng(9)
    params = {'spa': _mlp(rng, 27), 'in': _mlp(rng, 2), 'out': _mlp(rng, 3)}
    shape = (3, 2, 3)
    enc, h = 0.3, 1e-6
    jac = attention_jacobian(enc, params, shape)
    hi = attention_weights(enc + h, params, shape)
    lo = attention_weights(enc - h, params, shape)
    for name in ('att_spa', 'att_in', 'att_out'):
        fd = (getattr(hi, name) - getattr(lo, name)) / (2 * h)
        np.testing.assert_allclose(getattr(jac, name), fd, rtol=1e-5, atol=1e-9)


def test_dynamic_conv_backward_attention_gradient():
    """The attention gradient matches a finite difference of a linear readout."""
    rng = np.random.default_rng(10)
    f = rng.random((2, 4, 4, 4))
    w = rng.normal(size=(3, 3, 3, 2, 2))
    b = np.zeros(2)
    g = rng.normal(size=(2, 4, 4, 4))
    att = AttentionTriple(rng.random((3, 3, 3)), rng.random(2), rng.random(2))
    _, _, _, d_att = dynamic_conv_backward(f, w, att, g)
    h = 1e-3
    bumped = AttentionTriple(att.att_spa, att.att_in, att.att_out + np.array([h, 0.0]))
    fd = ((dynamic_conv(f, w, b, bumped) - dynamic_conv(f, w, b, att)) * g).sum() / h
    assert d_att.att_out[0] == pytest.approx(fd, rel=1e-4)
