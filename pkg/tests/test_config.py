import json

import pytest

from layerfuse.config import ExperimentConfig, from_dict, load_config
from layerfuse.errors import ConfigError
from layerfuse.fusion import FusionKind


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.train.batch_size == 16
    assert cfg.train.max_lr == 5e-5
    assert cfg.pretrain.batch_size == 8
    assert cfg.train.trials == 5
    assert cfg.fusion.kind is FusionKind.DWATT


def test_json_round_trip(tmp_path):
    cfg = ExperimentConfig().replace(seed=3, train__n_shot=None, fusion__kind="concat")
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    back = load_config(path)
    assert back == cfg
    assert back.to_json() == cfg.to_json()


def test_partial_file_takes_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"epochs": 7}}))
    cfg = load_config(path)
    assert cfg.train.epochs == 7 and cfg.train.batch_size == 16


@pytest.mark.parametrize("raw,field", [
    ({"train": {"epochs": 0}}, "train.epochs"),
    ({"train": {"batch_size": -1}}, "train.batch_size"),
    ({"train": {"mode": "XX"}}, "train.mode"),
    ({"train": {"bogus": 1}}, "train"),
    ({"fusion": {"kind": "sum"}}, "fusion.kind"),
    ({"encoder": {"d_model": 10, "n_heads": 4}}, "encoder"),
    ({"grid": {"n_shots": []}}, "grid.n_shots"),
    ({"nonsense": 1}, "top-level"),
])
def test_field_level_errors(raw, field):
    with pytest.raises(ConfigError, match=field):
        from_dict(raw)


def test_bad_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(path)
