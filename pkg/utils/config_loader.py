"""
config_loader.py
-----------------

Common configuration loader for the rbpet toolkit.  This module hides
the differences between YAML and JSON files, layers user files over the
packaged defaults and applies the ``RBPET_SEED`` / ``RBPET_THREADS``
environment overrides.

Usage:

    from utils.config_loader import load_config, load_pipeline_config
    nuclear = load_config('config/nuclear_data.yaml')
    cfg = load_pipeline_config('my_run.yaml')

The returned objects are plain dicts regardless of the input format.
"""

from __future__ import annotations

import copy
import json
import os
from typing import Any, Dict, Mapping

import yaml  # type: ignore

from utils.errors import ConfigError

HERE = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT_PIPELINE_PATH = os.path.join(HERE, 'config', 'pipeline.yaml')


def load_config(path: str) -> Dict[str, Any]:
    """Load a YAML or JSON configuration file.

    Parameters
    ----------
    path : str
        Path to the configuration file.  The file extension must be
        `.yaml`, `.yml` or `.json`.

    Returns
    -------
    dict
        Parsed configuration contents.  Returns an empty dict if the
        file does not exist.

    Raises
    ------
    ValueError
        If the file extension is not supported.
    ConfigError
        If the file exists but cannot be parsed into a mapping.
    """
    if not os.path.exists(path):
        return {}
    _, ext = os.path.splitext(path)
    ext = ext.lower()
    with open(path, 'r', encoding='utf-8') as f:
        try:
            if ext in {'.yaml', '.yml'}:
                doc = yaml.safe_load(f) or {}
            elif ext == '.json':
                doc = json.load(f)
            else:
                raise ValueError(f"Unsupported config extension: {ext}")
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise ConfigError(f'cannot parse {path}: {exc}') from exc
    if not isinstance(doc, dict):
        raise ConfigError(f'{path} does not contain a mapping')
    return doc


def deep_merge(base: Mapping[str, Any], overrides: Mapping[str, Any] | None) -> Dict[str, Any]:
    """Return ``base`` with ``overrides`` merged in recursively.

    Nested mappings are merged key by key; any other value in
    ``overrides`` replaces the base value.  Neither input is modified.
    """
    merged: Dict[str, Any] = copy.deepcopy(dict(base))
    for key, value in (overrides or {}).items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_env_overrides(cfg: Dict[str, Any]) -> Dict[str, Any]:
    """Apply ``RBPET_SEED`` and ``RBPET_THREADS`` to a pipeline config."""
    out = dict(cfg)
    for var, key in (('RBPET_SEED', 'seed'), ('RBPET_THREADS', 'threads')):
        raw = os.getenv(var)
        if raw is None or raw == '':
            continue
        try:
            out[key] = int(raw)
        except ValueError as exc:
            raise ConfigError(f'{var} must be an integer, got {raw!r}') from exc
    return out


def load_pipeline_config(path: str | None = None) -> Dict[str, Any]:
    """Load the packaged defaults, merge ``path`` over them and apply env overrides."""
    cfg = load_config(DEFAULT_PIPELINE_PATH)
    if path:
        if not os.path.exists(path):
            raise ConfigError(f'config file not found: {path}')
        cfg = deep_merge(cfg, load_config(path))
    return apply_env_overrides(cfg)


__all__ = [
    'load_config',
    'deep_merge',
    'apply_env_overrides',
    'load_pipeline_config',
    'DEFAULT_PIPELINE_PATH',
]
