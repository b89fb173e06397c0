import math

import pytest
from hypothesis import given, settings, strategies as st

from mvaf import config as C
from mvaf.backbones import ConfigError


def test_yaml_round_trip(tmp_path):
    cfg = C.apply_overrides(C.toy_preset(), {"model": {"fusion": "sc"}, "train": {"seed": 7}})
    C.save_config(cfg, tmp_path / "c.yaml")
    assert C.load_config(tmp_path / "c.yaml") == cfg


def test_presets_validate_and_differ():
    toy, full = C.toy_preset(), C.full_preset()
    C.validate(full)
    assert full.grid.bev_cell == 0.2 and full.model.image_size == (1248, 384)
    assert "grid.bev_cell" in C.diff_configs(C.to_dict(toy), C.to_dict(full))


def test_preset_key_selects_base():
    cfg = C.from_dict({"preset": "full", "train": {"steps": 3}})
    assert cfg.grid.bev_cell == 0.2 and cfg.train.steps == 3


def test_unknown_key_names_path():
    with pytest.raises(ConfigError, match="model.fuzion"):
        C.from_dict({"model": {"fuzion": "apf"}})


def test_schema_version_checked():
    with pytest.raises(ConfigError, match="schema_version"):
        C.from_dict({"schema_version": 99})


@pytest.mark.parametrize("changes,match", [
    ({"model": {"fusion": "late"}}, "model.fusion"),
    ({"grid": {"x_range": [5.0, 1.0]}}, "x_range"),
    ({"model": {"apw_cls": False, "apw_weight": True}}, "apw_weight"),
    ({"train": {"steps": "many"}}, "train.steps"),
    ({"head": {"anchor_size": [1.0, 2.0]}}, "anchor_size"),
    ({"model": {"norm_momentum": 1.0}}, "norm_momentum"),
])
def test_validation_errors(changes, match):
    with pytest.raises(ConfigError, match=match):
        C.apply_overrides(C.toy_preset(), changes)


def test_diff_lists_dotted_fields():
    a = C.to_dict(C.toy_preset())
    b = C.to_dict(C.apply_overrides(C.toy_preset(), {"train": {"max_lr": 1e-3}, "model": {"norm": "affine"}}))
    assert C.diff_configs(a, b) == ["model.norm", "train.max_lr"]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), lr=st.floats(1e-5, 1e-1), fusion=st.sampled_from(["apf", "es", "sc"]))
def test_dump_load_identity(seed, lr, fusion):
    cfg = C.apply_overrides(C.toy_preset(), {"train": {"seed": seed, "max_lr": lr}, "model": {"fusion": fusion}})
    import yaml

    assert C.from_dict(yaml.safe_load(C.dump_config(cfg))) == cfg


def test_integers_accepted_for_floats():
    cfg = C.apply_overrides(C.toy_preset(), {"grid": {"bev_cell": 1}})
    assert isinstance(cfg.grid.bev_cell, float) and math.isclose(cfg.grid.bev_cell, 1.0)
