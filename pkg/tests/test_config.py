"""Config loading: defaults, file/flag precedence, validation, TOML echo."""

from dataclasses import asdict

import pytest

from ncaseg.config import ConfigError, RunConfig, load_config, write_config
from ncaseg.datagen import DomainSpec


class TestDefaults:
    def test_no_file_gives_reference_settings(self):
        cfg = load_config(None)
        assert cfg.epochs == 100
        assert cfg.lr == 5e-4
        assert cfg.t_min == 64 and cfg.t_max == 256 and cfg.t_eval == 128
        assert cfg.image_size == [64, 64]
        assert len(cfg.domains) == 3
        assert cfg.reproducible is False

    def test_factory_lists_are_not_shared(self):
        a, b = RunConfig(), RunConfig()
        a.image_size.append(99)
        assert b.image_size == [64, 64]


class TestLoadConfig:
    def test_file_values_override_defaults(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('epochs = 7\nlr = 0.001\nout = "elsewhere"\n')
        cfg = load_config(p)
        assert cfg.epochs == 7
        assert cfg.lr == 0.001
        assert cfg.out == "elsewhere"
        assert cfg.batch_size == 32  # untouched default

    def test_flag_overrides_beat_file(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("seed = 1\nepochs = 7\n")
        cfg = load_config(p, overrides={"seed": 42, "epochs": None})
        assert cfg.seed == 42
        assert cfg.epochs == 7  # None override is "not given"

    def test_unknown_file_key_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("learning_rate = 0.001\n")
        with pytest.raises(ConfigError, match="learning_rate"):
            load_config(p)

    def test_unknown_override_key_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, overrides={"lr_schedule": "cosine"})

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.toml")

    def test_bad_toml_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("epochs = = 3\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_non_integer_counts_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('epochs = "ten"\n')
        with pytest.raises(ConfigError):
            load_config(p)

    def test_image_size_shape_checked(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("image_size = [64]\n")
        with pytest.raises(ConfigError, match="image_size"):
            load_config(p)


class TestDerivedConfigs:
    def test_nca_and_train_configs_carry_values(self):
        cfg = load_config(None, overrides={"state_dim": 16, "hidden_dim": 32, "lr": 0.002})
        nca = cfg.nca_config()
        assert nca.state_dim == 16 and nca.hidden_dim == 32
        train = cfg.train_config()
        assert train.lr == 0.002
        assert train.seed == cfg.seed

    def test_invalid_architecture_becomes_config_error(self):
        cfg = load_config(None, overrides={"state_dim": 4, "n_cls": 4})
        with pytest.raises(ConfigError):
            cfg.nca_config()

    def test_invalid_training_becomes_config_error(self):
        cfg = load_config(None, overrides={"t_min": 0})
        with pytest.raises(ConfigError):
            cfg.train_config()


class TestDomainSpecs:
    def test_default_domains_resolve(self):
        specs = load_config(None).domain_specs()
        assert [s.name for s in specs] == ["vendor_a", "vendor_b", "vendor_c"]
        assert all(isinstance(s, DomainSpec) for s in specs)

    def test_custom_domains_from_toml(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text(
            '[[domains]]\nname = "x"\ngamma = 1.2\n\n[[domains]]\nname = "y"\nnoise_sigma = 0.08\n'
        )
        specs = load_config(p).domain_specs()
        assert [s.name for s in specs] == ["x", "y"]
        assert specs[0].gamma == 1.2
        assert specs[1].noise_sigma == 0.08

    def test_domain_without_name_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[[domains]]\ngamma = 1.2\n")
        with pytest.raises(ConfigError, match="name"):
            load_config(p).domain_specs()

    def test_unknown_domain_key_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[[domains]]\nname = "x"\nsaturation = 2.0\n')
        with pytest.raises(ConfigError, match="saturation"):
            load_config(p).domain_specs()

    def test_duplicate_domain_names_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[[domains]]\nname = "x"\n\n[[domains]]\nname = "x"\n')
        with pytest.raises(ConfigError, match="duplicate"):
            load_config(p).domain_specs()

    def test_invalid_domain_value_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[[domains]]\nname = "x"\ngamma = -1.0\n')
        with pytest.raises(ConfigError):
            load_config(p).domain_specs()


class TestWriteConfig:
    def test_roundtrip_through_toml(self, tmp_path):
        cfg = load_config(None, overrides={"seed": 9, "epochs": 3, "reproducible": True})
        path = tmp_path / "echo.toml"
        write_config(cfg, path)
        loaded = load_config(path)
        assert asdict(loaded) == asdict(cfg)

    def test_written_file_is_flat_plus_domain_tables(self, tmp_path):
        path = tmp_path / "echo.toml"
        write_config(load_config(None), path)
        text = path.read_text()
        assert text.count("[[domains]]") == 3
        assert "epochs = 100" in text
        assert "reproducible = false" in text
