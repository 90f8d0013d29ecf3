import json

import pytest

from stormadapt.config import (
    OUT_ENV_VAR,
    PRESETS,
    SNAPSHOT_NAME,
    DataConfig,
    DmpConfig,
    ExperimentConfig,
    ModelConfig,
    RunConfig,
    TrainConfig,
    apply_overrides,
    load_config,
    output_root,
    parse_override,
    write_snapshot,
)
from stormadapt.errors import ConfigError, InputError


def write_config(path, raw):
    path.write_text(json.dumps(raw), encoding="utf-8")
    return path


class TestDefaults:
    def test_no_file_gives_defaults(self):
        cfg = load_config(None)
        assert cfg == ExperimentConfig()
        assert cfg.train.gamma == 0.1
        assert cfg.train.lr == 0.01 and cfg.train.lr_stage2 == 0.001
        assert cfg.metricreg.delta == 1.0
        assert (cfg.advgrl.lambda0, cfg.advgrl.alpha, cfg.advgrl.beta) == (1.0, 0.63, 30.0)
        assert cfg.data.val_split == "val-large"

    def test_partial_file(self, tmp_path):
        path = write_config(tmp_path / "c.json", {"train": {"gamma": 0.05}})
        cfg = load_config(path)
        assert cfg.train.gamma == 0.05
        assert cfg.model == ModelConfig()

    def test_lists_become_tuples(self, tmp_path):
        path = write_config(tmp_path / "c.json", {"model": {"anchor_sizes": [8, 16]}})
        assert load_config(path).model.anchor_sizes == (8, 16)


class TestErrors:
    def test_unknown_key_names_dotted_path(self, tmp_path):
        path = write_config(tmp_path / "c.json", {"train": {"gama": 0.1}})
        with pytest.raises(ConfigError, match="train.gama"):
            load_config(path)

    def test_unknown_section(self, tmp_path):
        path = write_config(tmp_path / "c.json", {"optimizer": {}})
        with pytest.raises(ConfigError, match="optimizer"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "missing.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_bad_values(self):
        with pytest.raises(InputError):
            TrainConfig(gamma=-1)
        with pytest.raises(InputError):
            TrainConfig(mode="sideways")
        with pytest.raises(InputError):
            TrainConfig(preset="everything")
        with pytest.raises(InputError):
            DataConfig(target_weather="snow")
        with pytest.raises(InputError):
            DmpConfig(patch_pixels=10)

    def test_class_names_beyond_drawable_shapes(self, tmp_path):
        path = write_config(tmp_path / "c.json", {
            "data": {"class_names": ["disc", "box", "triangle", "star"]},
            "model": {"num_classes": 4},
        })
        with pytest.raises(InputError, match="shape kinds"):
            load_config(path)

    def test_scene_geometry_checked_up_front(self):
        with pytest.raises(InputError):
            DataConfig(width=24, height=24)

    def test_class_count_must_match(self):
        with pytest.raises(ConfigError, match="num_classes"):
            ExperimentConfig(model=ModelConfig(num_classes=2))


class TestOverrides:
    def test_parse(self):
        assert parse_override("train.gamma=0.01") == ("train", "gamma", 0.01)
        assert parse_override("train.preset=full") == ("train", "preset", "full")
        assert parse_override("model.anchor_sizes=[8, 16]") == ("model", "anchor_sizes", [8, 16])

    def test_bad_syntax(self):
        for text in ("gamma=0.1", "train.gamma", "train.=1"):
            with pytest.raises(ConfigError):
                parse_override(text)

    def test_override_wins_over_file(self, tmp_path):
        path = write_config(tmp_path / "c.json", {"train": {"gamma": 0.05, "seed": 3}})
        cfg = apply_overrides(load_config(path), ["train.gamma=0.01"])
        assert cfg.train.gamma == 0.01
        assert cfg.train.seed == 3

    def test_unknown_override_key(self):
        with pytest.raises(ConfigError, match="train.gama"):
            apply_overrides(ExperimentConfig(), ["train.gama=1"])


class TestPresets:
    def test_alias(self):
        cfg = ExperimentConfig(train=TrainConfig(preset="baseline-grl"))
        assert cfg.switches == PRESETS["baseline"]

    def test_plain_grl_presets_use_constant_factor(self):
        cfg = ExperimentConfig(train=TrainConfig(preset="baseline"))
        assert cfg.reversal_config.alpha == 0.0
        assert cfg.reversal_config.lambda0 == 1.0

    def test_advgrl_presets_use_schedule(self):
        cfg = ExperimentConfig(train=TrainConfig(preset="advgrl"))
        assert cfg.reversal_config == cfg.advgrl

    def test_source_only_has_no_adaptation(self):
        assert not PRESETS["source-only"].any_domain_terms
        assert not PRESETS["source-only"].dmp
        assert PRESETS["full"].dmp and PRESETS["full"].obj_reg


class TestRuns:
    def test_output_root_precedence(self, monkeypatch, tmp_path):
        monkeypatch.delenv(OUT_ENV_VAR, raising=False)
        assert str(output_root()) == "runs"
        monkeypatch.setenv(OUT_ENV_VAR, str(tmp_path / "env"))
        assert output_root() == tmp_path / "env"
        assert output_root(str(tmp_path / "flag")) == tmp_path / "flag"

    def test_snapshot(self, tmp_path):
        cfg = ExperimentConfig(train=TrainConfig(preset="baseline-grl", seed=2))
        path = write_snapshot(RunConfig(cfg, 2, tmp_path / "run"))
        assert path.name == SNAPSHOT_NAME
        snapshot = json.loads(path.read_text(encoding="utf-8"))
        assert snapshot["preset"] == "baseline"
        assert snapshot["seed"] == 2
        assert ExperimentConfig.from_dict(snapshot["config"]) == cfg
