"""Unit tests for the volume data model and file formats."""
import numpy as np
import pytest

from utils.errors import DegenerateInputError, GeometryError, VolumeFormatError
from volume.core import (
    DynamicSeries,
    FrameSchedule,
    TimeActivityCurve,
    VoiMask,
    Volume3,
    extract_voi_tac,
    resample_aif_to_frames,
    static_frame,
)
from volume.io import (
    load_series,
    load_volume,
    read_tac_csv,
    store_series,
    store_volume,
    write_tac_csv,
)


def _series(values, dims=(4, 4, 3)):
    schedule = FrameSchedule.from_durations([(len(values), 10.0)])
    frames = np.stack([np.full(dims, v, dtype=float) for v in values])
    return DynamicSeries.from_array(frames, (2.0, 2.0, 2.0), schedule)


def test_rb82_default_schedule():
    """The default protocol has 38 contiguous frames ending at 6 minutes."""
    sched = FrameSchedule.rb82_default()
    assert len(sched) == 38
    assert sched.ends[-1] == pytest.approx(360.0)
    assert np.all(sched.starts[1:] == sched.ends[:-1])


def test_schedule_rejects_overlap():
    """Overlapping or empty frames raise GeometryError."""
    with pytest.raises(GeometryError):
        FrameSchedule(((0.0, 10.0), (5.0, 20.0)))
    with pytest.raises(GeometryError):
        FrameSchedule(((0.0, 0.0),))


def test_volume_is_read_only_copy():
    """Volume data is copied and frozen."""
    src = np.ones((2, 2, 2))
    vol = Volume3(src, (1.0, 1.0, 1.0))
    src[0, 0, 0] = 5.0
    assert vol.data[0, 0, 0] == 1.0
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 2.0


def test_volume_rejects_bad_geometry():
    """Non-3-D data and non-positive voxel sizes are rejected."""
    with pytest.raises(GeometryError):
        Volume3(np.ones((2, 2)), (1.0, 1.0, 1.0))
    with pytest.raises(GeometryError):
        Volume3(np.ones((2, 2, 2)), (1.0, 0.0, 1.0))


def test_extract_voi_tac_constant_region():
    """The TAC of a constant region equals that constant in every frame."""
    series = _series([1.0, 2.5, 4.0])
    mask = np.zeros((4, 4, 3), dtype=bool)
    mask[1:3, 1:3, 1] = True
    tac = extract_voi_tac(series, VoiMask(mask, 'core'))
    np.testing.assert_allclose(tac.values, [1.0, 2.5, 4.0], rtol=0, atol=1e-15)


def test_extract_voi_tac_dims_mismatch():
    """A mask on another grid is a geometry error."""
    series = _series([1.0])
    with pytest.raises(GeometryError):
        extract_voi_tac(series, VoiMask(np.ones((2, 2, 2), dtype=bool), 'x'))


def test_empty_mask_is_degenerate():
    """An all-false mask cannot be constructed."""
    with pytest.raises(DegenerateInputError):
        VoiMask(np.zeros((2, 2, 2), dtype=bool), 'empty')


def test_resample_aif_constant_signal_exact():
    """Averaging a constant dense curve returns the constant exactly."""
    sched = FrameSchedule.rb82_default()
    times = np.arange(0.0, 360.0, 0.5)
    tac = resample_aif_to_frames(times, np.full(times.size, 7.25), sched)
    assert np.all(tac.values == 7.25)


def test_resample_aif_frame_without_samples():
    """A frame containing no sample is degenerate."""
    sched = FrameSchedule(((0.0, 10.0), (10.0, 20.0)))
    with pytest.raises(DegenerateInputError):
        resample_aif_to_frames([1.0, 2.0, 3.0], [1.0, 1.0, 1.0], sched)


def test_static_frame_duration_weighted():
    """The static image weights frames by their overlap with the window."""
    series = _series([1.0, 3.0])
    vol = static_frame(series, 5.0, 20.0)
    # overlap 5 s with frame 0 and 10 s with frame 1
    np.testing.assert_allclose(vol.data, (5.0 * 1.0 + 10.0 * 3.0) / 15.0)


def test_volume_store_load_round_trip(tmp_path):
    """Float32-representable volumes survive a store/load round trip exactly."""
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4).astype(float) / 8.0
    vol = Volume3(data, (2.0, 2.0, 3.0))
    path = str(tmp_path / 'vol.json')
    store_volume(vol, path)
    back = load_volume(path)
    assert back.dims == (2, 3, 4)
    assert back.voxel_size == (2.0, 2.0, 3.0)
    assert np.array_equal(back.data, vol.data)


def test_float64_volume_rounds_to_float32(tmp_path):
    """Values that float32 cannot hold come back rounded, within float32 precision."""
    data = np.full((2, 2, 2), 0.1) + np.arange(8).reshape(2, 2, 2) * 1e-3
    path = str(tmp_path / 'vol.json')
    store_volume(Volume3(data, (2.0, 2.0, 2.0)), path)
    back = load_volume(path).data
    assert not np.array_equal(back, data)
    np.testing.assert_allclose(back, data, rtol=6e-8, atol=0.0)
    assert np.array_equal(back, data.astype(np.float32).astype(np.float64))


def test_series_store_load_keeps_schedule(tmp_path):
    """Series files keep the frame schedule and frame order."""
    series = _series([0.5, 1.5, 2.5])
    path = str(tmp_path / 'series.json')
    store_series(series, path)
    back = load_series(path)
    assert back.schedule == series.schedule
    assert np.array_equal(back.as_array(), series.as_array())


def test_truncated_payload_is_format_error(tmp_path):
    """A payload shorter than the header promises raises VolumeFormatError."""
    path = str(tmp_path / 'vol.json')
    store_volume(Volume3(np.ones((2, 2, 2)), (1.0, 1.0, 1.0)), path)
    raw = tmp_path / 'vol.raw'
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(VolumeFormatError):
        load_volume(path)


def test_tac_csv_round_trip(tmp_path):
    """TAC CSVs keep every float exactly."""
    sched = FrameSchedule(((0.0, 3.0), (3.0, 13.0)))
    tac = TimeActivityCurve(sched, [0.1, 1.0 / 3.0])
    path = str(tmp_path / 'tac.csv')
    write_tac_csv(tac, path)
    back = read_tac_csv(path)
    assert back.schedule == sched
    assert np.array_equal(back.values, tac.values)
