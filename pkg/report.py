#!/usr/bin/env python3
"""
report.py
---------

Tables and plot data from a completed results directory.  The report is
a pure function of that directory: it only reads pipeline artefacts and
writes into its own output directory (default ``<results>/report``).

Outputs:

* ``regional_summary.csv``  mean and SD of voxel K1, Vb and MBF per study,
  variant and region, with the stress/rest MFR of the regional means;
* ``idif_metrics.csv``      AUC, peak and tail differences of each IDIF
  against the AIF;
* ``tac_curves.csv``        regional TACs of every variant plus the AIF;
* ``bland_altman.csv``      regional MBF with the IDIF against MBF with
  the AIF (mean and difference per pair);
* ``profiles.csv``          central x profile through the display volume;
* ``display/<study>/<variant>_k1_display.json``  ``K1 * (1 - Vb)`` volumes;
* ``acceptance.json``       directional checks against a criteria profile;
* ``sources.json``          SHA-256 of every artefact the report read.

Rendering is left to external tools.

Example:

    python report.py --results results/ --profile default
"""

from __future__ import annotations

import argparse
import csv
import json
import os
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from audit_hash import sha256_of_file
from kinetics.flow import mbf_from_k1, mbf_map, mfr
from phantom.generator import BLOOD_POOL_LABEL, MYOCARDIUM_LABEL, PhantomSpec
from pipeline import PipelineConfig, RunPaths, load_mask
from utils.config_loader import load_config
from utils.errors import StageError
from utils.logging_utils import get_logger, setup_logging
from volume.core import DynamicSeries, VoiMask, Volume3, extract_voi_tac, resample_aif_to_frames
from volume.io import load_series, load_volume, read_dense_csv, store_volume

logger = get_logger(__name__)

HERE = os.path.dirname(os.path.abspath(__file__))
CRITERIA_PATH = os.path.join(HERE, 'config', 'acceptance_criteria.json')

SUMMARY_COLUMNS = ['study', 'variant', 'region', 'voxels', 'k1_mean', 'k1_sd', 'vb_mean',
                   'vb_sd', 'mbf_mean', 'mbf_sd', 'mfr']
IDIF_COLUMNS = ['study', 'variant', 'auc_pct', 'peak_pct', 'tail_pct']
TAC_COLUMNS = ['study', 'curve', 'region', 'time_start_s', 'time_end_s', 'value_bq_ml']
BLAND_ALTMAN_COLUMNS = ['study', 'variant', 'region', 'mbf_idif', 'mbf_aif', 'mean', 'difference']
PROFILE_COLUMNS = ['study', 'variant', 'x_mm', 'k1_display']


class SourceLog:
    """Open artefacts of a results directory and remember their digests."""

    def __init__(self, root: str) -> None:
        self.root = root
        self.digests: Dict[str, str] = {}

    def _record(self, path: str) -> None:
        rel = os.path.relpath(path, self.root).replace(os.sep, '/')
        if rel not in self.digests:
            self.digests[rel] = sha256_of_file(path)

    def use(self, path: str) -> str:
        if not os.path.exists(path):
            raise StageError('report', f'incomplete results: missing {path}')
        self._record(path)
        payload = os.path.splitext(path)[0] + '.raw'
        if path.endswith('.json') and os.path.exists(payload):
            self._record(payload)
        return path

    def json(self, path: str) -> Any:
        with open(self.use(path), 'r', encoding='utf-8') as f:
            return json.load(f)

    def volume(self, path: str) -> Volume3:
        return load_volume(self.use(path))

    def series(self, path: str) -> DynamicSeries:
        return load_series(self.use(path))

    def mask(self, path: str, label: str) -> VoiMask:
        return load_mask(self.use(path), label)


def _fmt(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def _write_csv(path: str, columns: Sequence[str], rows: Sequence[Dict[str, Any]]) -> str:
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, '')) for k in columns})
    return path


def _mean_sd(values: np.ndarray) -> tuple:
    if values.size == 0:
        return float('nan'), float('nan')
    sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return float(np.mean(values)), sd


def _present_variants(cfg: PipelineConfig, paths: RunPaths) -> List[str]:
    present = []
    for variant in cfg.variants:
        if all(os.path.exists(os.path.join(paths.fit_dir(s, variant), 'k1.json'))
               for s in cfg.studies):
            present.append(variant)
        else:
            logger.warning('variant %s has no fit results; left out of the report', variant)
    if not present:
        raise StageError('report', 'incomplete results: no fitted variant found')
    return present


def regional_summary(cfg: PipelineConfig, paths: RunPaths, src: SourceLog,
                     variants: Sequence[str]) -> List[Dict[str, Any]]:
    """One row per region, variant and study; MFR is stress over rest of the MBF means."""
    rows: List[Dict[str, Any]] = []
    for region in cfg.regions:
        for variant in variants:
            by_study: Dict[str, Dict[str, Any]] = {}
            for study in cfg.studies:
                mask = src.mask(paths.mask(study, region), region).mask
                k1 = src.volume(os.path.join(paths.fit_dir(study, variant), 'k1.json')).data[mask]
                vb = src.volume(os.path.join(paths.fit_dir(study, variant), 'vb.json')).data[mask]
                k1_mean, k1_sd = _mean_sd(k1)
                vb_mean, vb_sd = _mean_sd(vb)
                mbf_mean, mbf_sd = _mean_sd(mbf_map(k1))
                by_study[study] = {
                    'study': study, 'variant': variant, 'region': region,
                    'voxels': int(k1.size), 'k1_mean': k1_mean, 'k1_sd': k1_sd,
                    'vb_mean': vb_mean, 'vb_sd': vb_sd, 'mbf_mean': mbf_mean, 'mbf_sd': mbf_sd,
                    'mfr': '',
                }
            if 'rest' in by_study and 'stress' in by_study and by_study['rest']['mbf_mean'] > 0:
                ratio = mfr(by_study['stress']['mbf_mean'], by_study['rest']['mbf_mean'])
                for row in by_study.values():
                    row['mfr'] = ratio
            rows.extend(by_study[s] for s in cfg.studies)
    return rows


def idif_table(cfg: PipelineConfig, paths: RunPaths, src: SourceLog,
               variants: Sequence[str]) -> List[Dict[str, Any]]:
    rows = []
    for study in cfg.studies:
        metrics = src.json(paths.idif(study))
        for variant in variants:
            if variant in metrics:
                rows.append({'study': study, 'variant': variant, **metrics[variant]})
    return rows


def tac_curves(cfg: PipelineConfig, paths: RunPaths, src: SourceLog,
               variants: Sequence[str]) -> List[Dict[str, Any]]:
    rows: List[Dict[str, Any]] = []
    labels = [BLOOD_POOL_LABEL] + [r for r in cfg.regions if r != BLOOD_POOL_LABEL]
    for study in cfg.studies:
        masks = {label: src.mask(paths.mask(study, label), label) for label in labels}
        schedule = None
        for variant in variants:
            series = src.series(paths.series(study, variant))
            schedule = series.schedule
            for label, mask in masks.items():
                tac = extract_voi_tac(series, mask)
                for (start, end), value in zip(tac.schedule.frames, tac.values):
                    rows.append({'study': study, 'curve': variant, 'region': label,
                                 'time_start_s': start, 'time_end_s': end, 'value_bq_ml': value})
        if schedule is not None:
            times, values = read_dense_csv(src.use(paths.aif(study)))
            aif = resample_aif_to_frames(times, values, schedule)
            for (start, end), value in zip(aif.schedule.frames, aif.values):
                rows.append({'study': study, 'curve': 'aif', 'region': BLOOD_POOL_LABEL,
                             'time_start_s': start, 'time_end_s': end, 'value_bq_ml': value})
    return rows


def bland_altman(cfg: PipelineConfig, paths: RunPaths, src: SourceLog,
                 variants: Sequence[str]) -> List[Dict[str, Any]]:
    """Regional MBF with the image-derived input against MBF with the arterial input."""
    rows = []
    for study in cfg.studies:
        for variant in variants:
            regional = src.json(paths.regional(study, variant))
            for region in cfg.regions:
                if region not in regional:
                    continue
                a = float(regional[region]['idif']['MBF'])
                b = float(regional[region]['aif']['MBF'])
                rows.append({'study': study, 'variant': variant, 'region': region,
                             'mbf_idif': a, 'mbf_aif': b, 'mean': 0.5 * (a + b),
                             'difference': a - b})
    return rows


def display_volumes(cfg: PipelineConfig, paths: RunPaths, src: SourceLog,
                    variants: Sequence[str], out_dir: str) -> List[Dict[str, Any]]:
    """Write ``K1 * (1 - Vb)`` volumes and return their central x profiles."""
    rows: List[Dict[str, Any]] = []
    for study in cfg.studies:
        for variant in variants:
            k1 = src.volume(os.path.join(paths.fit_dir(study, variant), 'k1.json'))
            vb = src.volume(os.path.join(paths.fit_dir(study, variant), 'vb.json'))
            display = k1.with_data(k1.data * (1.0 - vb.data))
            store_volume(display, os.path.join(out_dir, 'display', study,
                                               f'{variant}_k1_display.json'))
            nx, ny, nz = display.dims
            dx = display.voxel_size[0]
            line = display.data[:, ny // 2, nz // 2]
            for i, value in enumerate(line):
                rows.append({'study': study, 'variant': variant,
                             'x_mm': (i - (nx - 1) / 2.0) * dx, 'k1_display': value})
    return rows


def _true_mbf(spec_doc: Dict[str, Any]) -> float:
    return mbf_from_k1(PhantomSpec.from_dict(spec_doc).myocardium_params().K1)


def acceptance_metrics(cfg: PipelineConfig, paths: RunPaths, src: SourceLog,
                       variants: Sequence[str], test: str = 'denoised_prc',
                       baseline: str = 'input') -> Optional[Dict[str, float]]:
    """Directional end-to-end metrics of ``test`` against ``baseline``, or ``None``."""
    if test not in variants or baseline not in variants:
        return None
    improved = 0
    frames = 0
    mbf_err = {test: 0.0, baseline: 0.0}
    auc = {test: 0.0, baseline: 0.0}
    for study in cfg.studies:
        truth = src.series(paths.series(study, 'truth')).as_array()
        mse = {}
        for v in (test, baseline):
            arr = src.series(paths.series(study, v)).as_array()
            mse[v] = ((arr - truth) ** 2).reshape(len(arr), -1).mean(axis=1)
        # ties count: opening frames with no activity match the truth in both variants
        improved += int(np.count_nonzero(mse[test] <= mse[baseline]))
        frames += len(truth)
        true_mbf = _true_mbf(src.json(paths.phantom(study, 'spec')))
        metrics = src.json(paths.idif(study))
        for v in (test, baseline):
            regional = src.json(paths.regional(study, v))
            if MYOCARDIUM_LABEL in regional:
                mbf_err[v] += abs(float(regional[MYOCARDIUM_LABEL]['idif']['MBF']) - true_mbf)
            auc[v] += float(metrics[v]['auc_pct'])
    return {
        'improved_frame_share': improved / frames if frames else 0.0,
        'mbf_abs_error': mbf_err[test],
        'mbf_abs_error_baseline': mbf_err[baseline],
        'idif_auc_pct': auc[test],
        'idif_auc_pct_baseline': auc[baseline],
    }


def evaluate_acceptance(metrics: Optional[Dict[str, float]],
                        criteria: Dict[str, Any]) -> Dict[str, Any]:
    """Compare metrics against one criteria profile; missing metrics fail nothing."""
    if metrics is None:
        return {'evaluated': False, 'checks': {}, 'passed': None}
    checks = {
        'frame_mse': metrics['improved_frame_share'] >= float(
            criteria.get('min_improved_frame_share', 0.0)),
    }
    if criteria.get('require_mbf_improvement', True):
        checks['mbf_error'] = metrics['mbf_abs_error'] < metrics['mbf_abs_error_baseline']
    if criteria.get('require_idif_auc_improvement', True):
        checks['idif_auc'] = metrics['idif_auc_pct'] <= metrics['idif_auc_pct_baseline']
    return {'evaluated': True, 'metrics': metrics, 'checks': checks,
            'passed': all(checks.values())}


def build_report(results_dir: str, out_dir: Optional[str] = None, profile: str = 'default',
                 criteria_path: str = CRITERIA_PATH) -> Dict[str, str]:
    """Write every report table for ``results_dir``; returns the written paths.

    Raises
    ------
    StageError
        If the results are incomplete (no config, no fitted variant or a
        missing artefact).
    """
    config_path = os.path.join(results_dir, 'config.json')
    if not os.path.exists(config_path):
        raise StageError('report', f'incomplete results: missing {config_path}')
    src = SourceLog(results_dir)
    cfg = PipelineConfig.from_dict(src.json(config_path))
    paths = RunPaths(results_dir, dict(cfg.inputs))
    out_dir = out_dir or paths.report_dir
    os.makedirs(out_dir, exist_ok=True)
    variants = _present_variants(cfg, paths)

    written = {
        'regional_summary': _write_csv(os.path.join(out_dir, 'regional_summary.csv'),
                                       SUMMARY_COLUMNS,
                                       regional_summary(cfg, paths, src, variants)),
        'idif_metrics': _write_csv(os.path.join(out_dir, 'idif_metrics.csv'), IDIF_COLUMNS,
                                   idif_table(cfg, paths, src, variants)),
        'tac_curves': _write_csv(os.path.join(out_dir, 'tac_curves.csv'), TAC_COLUMNS,
                                 tac_curves(cfg, paths, src, variants)),
        'bland_altman': _write_csv(os.path.join(out_dir, 'bland_altman.csv'),
                                   BLAND_ALTMAN_COLUMNS, bland_altman(cfg, paths, src, variants)),
        'profiles': _write_csv(os.path.join(out_dir, 'profiles.csv'), PROFILE_COLUMNS,
                               display_volumes(cfg, paths, src, variants, out_dir)),
    }

    profiles = load_config(criteria_path).get('profiles', {})
    if profile not in profiles:
        logger.warning('criteria profile %s not found in %s', profile, criteria_path)
    result = evaluate_acceptance(acceptance_metrics(cfg, paths, src, variants),
                                 profiles.get(profile, {}))
    result['profile'] = profile
    written['acceptance'] = os.path.join(out_dir, 'acceptance.json')
    with open(written['acceptance'], 'w', encoding='utf-8') as f:
        json.dump(result, f, indent=2, sort_keys=True)
    if result['evaluated']:
        logger.info('acceptance profile %s: %s', profile,
                    'passed' if result['passed'] else 'failed', extra={'stage': 'report'})

    written['sources'] = os.path.join(out_dir, 'sources.json')
    with open(written['sources'], 'w', encoding='utf-8') as f:
        json.dump(dict(sorted(src.digests.items())), f, indent=2, sort_keys=True)
    logger.info('report for %s written to %s', results_dir, out_dir, extra={'stage': 'report'})
    return written


def main() -> None:
    setup_logging()
    parser = argparse.ArgumentParser(description='Build report tables from a results directory.')
    parser.add_argument('--results', required=True, help='Results directory of a pipeline run')
    parser.add_argument('--out', help='Output directory (default <results>/report)')
    parser.add_argument('--profile', default='default', help='Acceptance criteria profile')
    parser.add_argument('--criteria', default=CRITERIA_PATH, help='Acceptance criteria file')
    args = parser.parse_args()
    build_report(args.results, args.out, args.profile, args.criteria)


if __name__ == '__main__':
    main()
