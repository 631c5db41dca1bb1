"""Unit tests for the shared helpers in utils/."""
import json
import logging

import numpy as np
import pytest

from utils.config_loader import apply_env_overrides, deep_merge, load_config
from utils.errors import ConfigError, GeometryError, RbPetError, StageError
from utils.logging_utils import JsonFormatter
from utils.rng import derived_rng, derived_seed


def test_deep_merge_is_recursive_and_pure():
    """Nested mappings merge key by key and neither input changes."""
    base = {'fit': {'mask': 'heart', 'chunk_size': 512}, 'seed': 0}
    merged = deep_merge(base, {'fit': {'chunk_size': 64}, 'studies': ['rest']})
    assert merged == {'fit': {'mask': 'heart', 'chunk_size': 64}, 'seed': 0, 'studies': ['rest']}
    assert base['fit']['chunk_size'] == 512


def test_load_config_formats(tmp_path):
    """YAML and JSON load to dicts; missing files are empty; other content is rejected."""
    (tmp_path / 'a.yaml').write_text('seed: 3\n')
    (tmp_path / 'b.json').write_text(json.dumps({'seed': 4}))
    (tmp_path / 'c.yaml').write_text('- 1\n- 2\n')
    (tmp_path / 'd.txt').write_text('seed=1')
    assert load_config(str(tmp_path / 'a.yaml')) == {'seed': 3}
    assert load_config(str(tmp_path / 'b.json')) == {'seed': 4}
    assert load_config(str(tmp_path / 'missing.yaml')) == {}
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / 'c.yaml'))
    with pytest.raises(ValueError):
        load_config(str(tmp_path / 'd.txt'))


def test_env_overrides(monkeypatch):
    """RBPET_THREADS sets threads; a non-integer value is a config error."""
    monkeypatch.setenv('RBPET_THREADS', '4')
    monkeypatch.delenv('RBPET_SEED', raising=False)
    assert apply_env_overrides({'threads': 1, 'seed': 2}) == {'threads': 4, 'seed': 2}
    monkeypatch.setenv('RBPET_SEED', 'abc')
    with pytest.raises(ConfigError):
        apply_env_overrides({})


def test_derived_streams():
    """Streams repeat for equal keys and differ between keys."""
    a = derived_rng(3, 1, 2).random(4)
    assert np.array_equal(a, derived_rng(3, 1, 2).random(4))
    assert not np.array_equal(a, derived_rng(3, 2, 1).random(4))
    assert derived_seed(3, 1) == derived_seed([3], 1)
    assert derived_seed(3, 1) != derived_seed(3, 2)
    with pytest.raises(ValueError):
        derived_rng(3, -1)


def test_error_hierarchy():
    """Stage errors carry the stage name; geometry errors are value errors."""
    err = StageError('fit', 'missing input')
    assert err.stage == 'fit' and 'fit' in str(err)
    assert issubclass(GeometryError, ValueError)
    assert isinstance(ConfigError('x'), RbPetError)


def test_json_formatter_includes_stage():
    """JSON log lines carry the stage passed through ``extra``."""
    record = logging.LogRecord('pipeline', logging.INFO, __file__, 1, 'stage %s', ('fit',), None)
    record.stage = 'fit'
    doc = json.loads(JsonFormatter().format(record))
    assert doc['message'] == 'stage fit'
    assert doc['stage'] == 'fit' and doc['level'] == 'INFO'
