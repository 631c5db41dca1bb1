#!/usr/bin/env python3
"""
generate_config.py
------------------

This script reads the pipeline template defined in
``config/pipeline_template.yaml`` and produces a concrete run
configuration based on user-supplied overrides.  Command-line flags set
the results directory, seed, worker count, studies and stage list;
anything else can be overridden from a JSON or YAML file, which is deep
merged into the template.  The result is validated against the packaged
defaults before it is written, so a bad override fails here rather than
in the middle of a run.

Example:

```bash
python generate_config.py --output-dir results/stress_only --studies stress \
--seed 7 --overrides my_training.yaml --out runs/stress_only.yaml
```
"""

from __future__ import annotations

import argparse
import json
import os
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

import yaml  # type: ignore

from pipeline import PipelineConfig
from utils.config_loader import DEFAULT_PIPELINE_PATH, deep_merge, load_config
from utils.errors import ConfigError
from utils.logging_utils import get_logger, setup_logging

HERE = os.path.dirname(os.path.abspath(__file__))
TEMPLATE_PATH = os.path.join(HERE, 'config', 'pipeline_template.yaml')

logger = get_logger(__name__)


def load_template(path: Optional[str] = None) -> Dict[str, Any]:
    """Load and return the pipeline template as a Python dictionary."""
    with open(path or TEMPLATE_PATH, 'r', encoding='utf-8') as f:
        return yaml.safe_load(f) or {}


def merge_config(
    template: Dict[str, Any],
    output_dir: Optional[str] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    studies: Optional[List[str]] = None,
    stages: Optional[List[str]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """Merge user-specified parameters into the template.

    Parameters
    ----------
    template : dict
        The loaded pipeline template.
    output_dir, seed, threads : optional
        Replace the template values when given.
    studies, stages : list of str, optional
        Replace the template lists when given.
    overrides : dict, optional
        Deep-merged last, so it wins over every flag.

    Returns
    -------
    dict
        A new configuration dictionary; the template is not modified.
    """
    flags: Dict[str, Any] = {}
    if output_dir:
        flags['output_dir'] = output_dir
    if seed is not None:
        flags['seed'] = seed
    if threads is not None:
        flags['threads'] = threads
    if studies:
        flags['studies'] = list(studies)
    if stages:
        flags['stages'] = list(stages)
    return deep_merge(deep_merge(template, flags), overrides)


def parse_overrides(path: Optional[str]) -> Optional[Dict[str, Any]]:
    """Parse a YAML or JSON overrides file if provided."""
    if not path:
        return None
    if not os.path.exists(path):
        raise ConfigError(f'overrides file not found: {path}')
    return load_config(path)


def validate(doc: Dict[str, Any]) -> PipelineConfig:
    """Check the generated document the way a run would load it.

    Raises
    ------
    ConfigError
        If a required field is still ``null`` or the merged configuration
        is rejected.
    """
    missing = sorted(k for k, v in doc.items() if v is None)
    if missing:
        raise ConfigError(f'template fields left unset: {missing}')
    return PipelineConfig.from_dict(deep_merge(load_config(DEFAULT_PIPELINE_PATH), doc))


def save_config(doc: Dict[str, Any], out: Optional[str] = None) -> str:
    """Write the configuration as YAML; without ``out`` a timestamped name under ``runs/``."""
    if out is None:
        timestamp = datetime.now(timezone.utc).strftime('%Y%m%dT%H%M%SZ')
        out = os.path.join(HERE, 'runs', f'pipeline_{timestamp}.yaml')
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, 'w', encoding='utf-8') as f:
        if out.endswith('.json'):
            json.dump(doc, f, indent=2)
        else:
            yaml.safe_dump(doc, f, sort_keys=False)
    return out


def main() -> None:
    """Entry point for CLI invocation."""
    setup_logging()
    parser = argparse.ArgumentParser(description='Compile a run configuration from the template.')
    parser.add_argument('--output-dir', help='Results directory of the run')
    parser.add_argument('--seed', type=int, help='Base seed')
    parser.add_argument('--threads', type=int, help='joblib workers')
    parser.add_argument('--studies', nargs='+', help='Studies to simulate (rest, stress)')
    parser.add_argument('--stages', nargs='+', help='Stage list of the run')
    parser.add_argument('--overrides', help='Path to YAML/JSON file with overrides')
    parser.add_argument('--template', help='Alternative template file')
    parser.add_argument('--out', help='Output path (.yaml or .json)')
    args = parser.parse_args()
    try:
        doc = merge_config(load_template(args.template), args.output_dir, args.seed,
                           args.threads, args.studies, args.stages,
                           parse_overrides(args.overrides))
        validate(doc)
    except ConfigError as exc:
        logger.error('configuration error: %s', exc)
        raise SystemExit(2)
    outfile = save_config(doc, args.out)
    logger.info('Configuration saved to %s', outfile)


if __name__ == '__main__':
    main()
