import json

import pytest

from conftest import TINY_LAB, tiny_lab_dict
from src.config import ConfigError, ModelConfig, apply_overrides, deep_merge, load_config, parse_config
from src.utils import project_path


def test_defaults_load():
    cfg = load_config()
    assert cfg.run_name == "default"
    assert cfg.precision == "f32"
    assert cfg.engine_ids == ["A", "B"]
    specs = cfg.specs()
    assert specs[0].in_channels == 9 and specs[0].n_state == 8
    assert specs[1].in_channels == 20
    assert cfg.corrector.build(cfg.world).in_channels == 20
    assert cfg.world.split_lengths["test"] == 9 * 36
    assert [s.model.dim for s in specs] == [64, 64]
    assert cfg.corrector.build(cfg.world).dim == 64
    assert ModelConfig().dim == 64


def test_three_sphere_overlay_loads():
    cfg = load_config(project_path("src", "lab_config_land.json"))
    assert [s.name for s in cfg.world.spheres] == ["A", "B", "L"]
    assert cfg.world.sphere("L").mask == "land"
    assert cfg.engine("L").model.dim == 16
    assert cfg.schedule("L").epochs == 20


def test_dotted_overrides_are_parsed_as_json():
    cfg = load_config(overrides={"rollout.horizon": "50", "corrector.enabled": "false", "engines.0.checkpoint": "best"})
    assert cfg.rollout.horizon == 50
    assert cfg.corrector.enabled is False
    assert cfg.engine("A").checkpoint == "best"


def test_unknown_override_suggests_a_key():
    with pytest.raises(ConfigError, match="did you mean 'horizon'"):
        load_config(overrides={"rollout.horizn": "5"})
    with pytest.raises(ConfigError):
        apply_overrides({"engines": [{}]}, {"engines.3.sphere": "A"})


def test_deep_merge_replaces_lists_and_merges_dicts():
    merged = deep_merge({"a": {"x": 1, "y": 2}, "b": [1, 2]}, {"a": {"y": 3}, "b": [4]})
    assert merged == {"a": {"x": 1, "y": 3}, "b": [4]}


def test_user_file_is_merged_over_defaults(tmp_path):
    path = tmp_path / "lab.json"
    path.write_text(json.dumps({"run_name": "mine", "rollout": {"ics": 3}}), encoding="utf-8")
    cfg = load_config(str(path))
    assert cfg.run_name == "mine"
    assert cfg.rollout.ics == 3 and cfg.rollout.horizon == 300


def test_bad_user_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(broken))
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"rollouts": {}}), encoding="utf-8")
    with pytest.raises(ConfigError, match="rollout"):
        load_config(str(unknown))


def test_every_sphere_needs_one_engine():
    data = tiny_lab_dict()
    data["engines"] = data["engines"][:1]
    with pytest.raises(ConfigError, match="missing"):
        parse_config(data)


def test_boundary_variable_must_exist():
    data = tiny_lab_dict()
    data["engines"][0]["boundary"] = [["B", "B7", "t"]]
    with pytest.raises(ConfigError, match="B7"):
        parse_config(data)


def test_next_time_boundary_needs_earlier_engine():
    data = tiny_lab_dict()
    data["engines"][0]["boundary"] = [["B", "B0", "t+1"]]
    with pytest.raises(ConfigError, match="t\\+1"):
        parse_config(data)


def test_unknown_engine_key_and_bad_checkpoint():
    data = tiny_lab_dict()
    data["engines"][0]["chekpoint"] = "best"
    with pytest.raises(ConfigError, match="checkpoint"):
        parse_config(data)
    data = tiny_lab_dict()
    data["engines"][0]["checkpoint"] = "latest"
    with pytest.raises(ConfigError):
        parse_config(data)


def test_rollout_must_fit_in_test_split():
    data = tiny_lab_dict(rollout={"horizon": 11, "ics": 2})
    with pytest.raises(ConfigError, match="Test split"):
        parse_config(data)


def test_invalid_precision_and_world():
    with pytest.raises(ConfigError):
        parse_config(tiny_lab_dict(precision="f16"))
    with pytest.raises(ConfigError, match="world"):
        parse_config(tiny_lab_dict(world={"train_cycles": 1}))


def test_corrector_needs_a_schedule_only_when_enabled():
    data = tiny_lab_dict()
    del data["schedules"]["corrector"]
    with pytest.raises(ConfigError, match="corrector"):
        parse_config(data)
    data["corrector"]["enabled"] = False
    assert not parse_config(data).corrector.enabled


def test_section_digest_tracks_only_its_sections(tiny_lab):
    other = parse_config(tiny_lab_dict(rollout={"horizon": 2}))
    assert other.section_digest("world") == tiny_lab.section_digest("world")
    assert other.section_digest("rollout") != tiny_lab.section_digest("rollout")
    assert other.digest() != tiny_lab.digest()


def test_tiny_lab_fixture_matches_its_source(tiny_lab):
    assert tiny_lab.run_name == TINY_LAB["run_name"]
    assert tiny_lab.world.height == 8 and tiny_lab.corrector.window == 2


def test_ablation_defaults_and_variants(tiny_lab):
    assert tiny_lab.ablation.enabled is False
    assert tiny_lab.ablation.variants == ("full", "no-dsl", "no-agb")
    engine = tiny_lab.engine("B")
    assert engine.spec(tiny_lab.world).model.dsl_positions == (1,)
    assert engine.spec(tiny_lab.world, "no-dsl").model.dsl_positions == ()
    no_agb = engine.spec(tiny_lab.world, "no-agb").model
    assert no_agb.encoder_depth == 1 and no_agb.dsl_positions == (0,)


def test_enabled_ablation_is_validated():
    with pytest.raises(ConfigError, match="did you mean 'no-dsl'"):
        parse_config(tiny_lab_dict(ablation={"enabled": True, "variants": ["full", "nodsl"]}))
    with pytest.raises(ConfigError, match="has no engine"):
        parse_config(tiny_lab_dict(ablation={"enabled": True, "engine": "C"}))
    with pytest.raises(ConfigError, match="ablation.lead"):
        parse_config(tiny_lab_dict(ablation={"enabled": True, "lead": 4}))
    no_dsl_model = dict(TINY_LAB["engines"][1]["model"], dsl_positions=[])
    engines = [TINY_LAB["engines"][0], dict(TINY_LAB["engines"][1], model=no_dsl_model)]
    with pytest.raises(ConfigError, match="no DSL-Blocks"):
        parse_config(tiny_lab_dict(engines=engines, ablation={"enabled": True}))
    # a disabled section is not checked against the engines
    assert parse_config(tiny_lab_dict(ablation={"engine": "C"})).ablation.engine == "C"
