"""Volumetric and temporal data model plus file I/O."""

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

__all__ = [
    'DynamicSeries',
    'FrameSchedule',
    'TimeActivityCurve',
    'VoiMask',
    'Volume3',
    'extract_voi_tac',
    'resample_aif_to_frames',
    'static_frame',
]
