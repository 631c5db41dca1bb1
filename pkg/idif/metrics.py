"""
metrics.py
----------

Input-function comparison metrics.  Frame values are interval averages,
so the area under the curve is exact under the rectangle rule, and the
tail value is the overlap-weighted mean over the 2.16-4 min window.

Example:

    cmp = compare(idif_tac, aif_tac)
    print(cmp.to_dict())   # {'auc_pct': ..., 'peak_pct': ..., 'tail_pct': ...}
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from utils.errors import DegenerateInputError, GeometryError
from volume.core import TimeActivityCurve

TAIL_WINDOW_S: Tuple[float, float] = (129.6, 240.0)


@dataclass(frozen=True)
class IfComparison:
    """Absolute percentage differences of IDIF against the AIF reference."""

    auc_pct_diff: float
    peak_pct_diff: float
    tail_pct_diff: float

    def to_dict(self) -> Dict[str, float]:
        return {
            'auc_pct': self.auc_pct_diff,
            'peak_pct': self.peak_pct_diff,
            'tail_pct': self.tail_pct_diff,
        }


def auc(tac: TimeActivityCurve) -> float:
    """Area under the curve in Bq*s/ml over the whole scan."""
    return float((tac.values * tac.schedule.durations).sum())


def peak(tac: TimeActivityCurve) -> float:
    if len(tac) == 0:
        raise DegenerateInputError('empty TAC has no peak')
    return float(tac.values.max())


def window_overlap(tac: TimeActivityCurve,
                   window: Tuple[float, float] = TAIL_WINDOW_S) -> np.ndarray:
    lo, hi = window
    sched = tac.schedule
    return np.clip(np.minimum(sched.ends, hi) - np.maximum(sched.starts, lo), 0.0, None)


def tail(tac: TimeActivityCurve, window: Tuple[float, float] = TAIL_WINDOW_S) -> float:
    """Overlap-weighted mean of the frames intersecting ``window`` (seconds).

    Raises
    ------
    DegenerateInputError
        If no frame overlaps the window.
    """
    overlap = window_overlap(tac, window)
    total = overlap.sum()
    if total <= 0:
        raise DegenerateInputError(f'no frame overlaps the tail window {window}')
    return float((overlap * tac.values).sum() / total)


def _pct(test: float, ref: float, name: str) -> float:
    if ref == 0:
        raise DegenerateInputError(f'reference {name} is zero')
    return 100.0 * abs(test - ref) / abs(ref)


def compare(idif: TimeActivityCurve, aif_resampled: TimeActivityCurve) -> IfComparison:
    """Percentage differences ``100 |m(idif) - m(aif)| / m(aif)`` for AUC, peak and tail.

    Raises
    ------
    GeometryError
        If the two curves use different schedules.
    DegenerateInputError
        If an AIF metric is zero.
    """
    if idif.schedule != aif_resampled.schedule:
        raise GeometryError('IDIF and AIF must share one frame schedule')
    return IfComparison(
        auc_pct_diff=_pct(auc(idif), auc(aif_resampled), 'AUC'),
        peak_pct_diff=_pct(peak(idif), peak(aif_resampled), 'peak'),
        tail_pct_diff=_pct(tail(idif), tail(aif_resampled), 'tail'),
    )


__all__ = [
    'TAIL_WINDOW_S',
    'IfComparison',
    'auc',
    'peak',
    'tail',
    'window_overlap',
    'compare',
]
