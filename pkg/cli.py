#!/usr/bin/env python3
"""
cli.py
------

Command-line front end.  ``run`` executes the configured stage list;
every other subcommand runs one pipeline stage against the results
directory of the configuration, so a run can be resumed or repeated
stage by stage.  ``simulate-kernel`` and ``prc-rl`` also work on single
files when given ``--isotope`` / ``--input``.

Exit codes: 0 success, 2 configuration or argument error, 3 stage failure.

Examples:

```bash
python cli.py run --config my_run.yaml --seed 3 --threads 4
python cli.py fit --config my_run.yaml
python cli.py simulate-kernel --isotope rb82 --tissue lung --n 300000 --out rb82_lung.json
python cli.py report --results results/ --profile lenient
```
"""

from __future__ import annotations

import argparse
import sys
from typing import Callable, Dict, List, Optional

from deconv.richardson_lucy import RLOptions, richardson_lucy
from physics.kernels import load_kernel, simulate_kernel, store_kernel
from pipeline import DEFAULT_STAGES, PipelineConfig, run_pipeline
from report import CRITERIA_PATH, build_report
from utils.errors import ConfigError, RbPetError
from utils.logging_utils import get_logger, setup_logging
from volume.io import load_series, store_series

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _config(args: argparse.Namespace) -> PipelineConfig:
    return PipelineConfig.load(args.config, seed=args.seed, threads=args.threads,
                               output_dir=args.output_dir)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    result = run_pipeline(cfg)
    logger.info('completed %d stages; manifest %s', len(result.stages), result.manifest)
    return EXIT_OK


def _stage_command(stage: str) -> Callable[[argparse.Namespace], int]:
    def handler(args: argparse.Namespace) -> int:
        run_pipeline(_config(args), [stage])
        return EXIT_OK
    return handler


def cmd_simulate_kernel(args: argparse.Namespace) -> int:
    if args.isotope is None:
        return _stage_command('simulate-kernel')(args)
    if not args.out:
        raise ConfigError('--out is required with --isotope')
    seed = 0 if args.seed is None else args.seed
    threads = 1 if args.threads is None else args.threads
    kernel = simulate_kernel(args.isotope, args.tissue, args.n, seed,
                             voxel_size=tuple(args.voxel_size), n_jobs=threads)
    store_kernel(kernel, args.out)
    logger.info('kernel written to %s', args.out)
    return EXIT_OK


def cmd_prc_rl(args: argparse.Namespace) -> int:
    if args.input is None:
        return _stage_command('prc-rl')(args)
    if not (args.kernel and args.out):
        raise ConfigError('--kernel and --out are required with --input')
    kernel = load_kernel(args.kernel)
    series = load_series(args.input)
    opts = RLOptions()
    frames = [richardson_lucy(vol, kernel, args.iters, opts).data for vol in series.volumes]
    store_series(series.with_frames(frames), args.out)
    logger.info('deconvolved series written to %s', args.out)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    results = args.results or _config(args).output_dir
    build_report(results, args.out, args.profile, args.criteria)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='Pipeline configuration (YAML or JSON)')
    common.add_argument('--seed', type=int, help='Base seed (overrides config and RBPET_SEED)')
    common.add_argument('--threads', type=int,
                        help='joblib workers (overrides config and RBPET_THREADS)')
    common.add_argument('--output-dir', help='Results directory (overrides config)')

    parser = argparse.ArgumentParser(
        description='Rb-82 dynamic PET denoising and positron range correction toolkit.',
        epilog='--config, --seed, --threads and --output-dir follow the subcommand.',
    )
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('run', parents=[common], help='Run the configured stage list'
                   ).set_defaults(handler=cmd_run)

    kernel = sub.add_parser('simulate-kernel', parents=[common],
                            help='Simulate positron range kernels')
    kernel.add_argument('--isotope', help='Simulate a single kernel (f18 or rb82)')
    kernel.add_argument('--tissue', default='striated', help='Tissue name in nuclear data')
    kernel.add_argument('--n', type=int, default=300000, help='Number of positrons')
    kernel.add_argument('--voxel-size', type=float, nargs=3, default=[2.036, 2.036, 2.0],
                        metavar=('DX', 'DY', 'DZ'), help='Voxel size in mm')
    kernel.add_argument('--out', help='Kernel output path (single-kernel mode)')
    kernel.set_defaults(handler=cmd_simulate_kernel)

    rl = sub.add_parser('prc-rl', parents=[common], help='Richardson-Lucy range correction')
    rl.add_argument('--input', help='Series to deconvolve (single-file mode)')
    rl.add_argument('--kernel', help='Range kernel for single-file mode')
    rl.add_argument('--iters', type=int, default=10, help='RL iterations')
    rl.add_argument('--out', help='Output series path (single-file mode)')
    rl.set_defaults(handler=cmd_prc_rl)

    report = sub.add_parser('report', parents=[common], help='Build report tables')
    report.add_argument('--results', help='Results directory (default: config output_dir)')
    report.add_argument('--out', help='Report directory (default <results>/report)')
    report.add_argument('--profile', default='default', help='Acceptance criteria profile')
    report.add_argument('--criteria', default=CRITERIA_PATH, help='Acceptance criteria file')
    report.set_defaults(handler=cmd_report)

    helps: Dict[str, str] = {
        'factorize': 'Factorise the F-18 to Rb-82 kernel',
        'phantom': 'Generate truth and degraded phantom studies',
        'train-denoise': 'Train the self-supervised denoiser',
        'train-prc': 'Train the range-correction network',
        'train-joint': 'Fine-tune both networks end to end',
        'apply': 'Apply the trained networks to the degraded studies',
        'fit': 'Fit parametric images for every variant',
        'idif-compare': 'Compare image-derived and arterial input functions',
    }
    for stage in DEFAULT_STAGES:
        if stage in helps:
            sub.add_parser(stage, parents=[common], help=helps[stage]
                           ).set_defaults(handler=_stage_command(stage))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        logger.error('configuration error: %s', exc)
        return EXIT_CONFIG
    except RbPetError as exc:
        logger.error('%s', exc, extra={'stage': getattr(exc, 'stage', args.command)})
        return EXIT_STAGE


if __name__ == '__main__':
    sys.exit(main())
