import math

import pytest

from bnas import config
from bnas.config import ConfigError, RunConfig


def _write(tmp_path, text):
    path = tmp_path / "run.toml"
    path.write_text(text, encoding="utf-8")
    return path


def test_no_file_means_defaults():
    cfg = config.load_config(None)
    assert cfg == RunConfig()
    assert cfg.train.preset == "bnas-mini"
    assert cfg.search.gamma == 1.0


def test_file_values_override_defaults_and_seed_flows_into_search(tmp_path):
    cfg = config.load_config(
        _write(
            tmp_path,
            'seed = 4\nout = "x"\n[search]\nepochs = 3\ngamma = "inf"\n[data]\nsource = "synthetic"\n',
        )
    )
    assert cfg.seed == 4 and cfg.search.seed == 4
    assert cfg.search.epochs == 3
    assert math.isinf(cfg.search.gamma)
    assert cfg.data.source == "synthetic"
    assert cfg.out_dir.name == "x"


@pytest.mark.parametrize(
    "text,match",
    [
        ("[plots]\nx = 1\n", "unknown section"),
        ("[search]\nepoch = 3\n", r"unknown key\(s\) in \[search\]: epoch"),
        ("[search]\ngamma = 0.5\n", r"\[search\] gamma must be >= 1"),
        ("[search]\nops = ['bin_conv_7x7']\n", r"\[search\]"),
        ("[train]\npreset = 'bnas-z'\n", "unknown preset"),
        ("[train]\nscheme = 'fast'\n", "unknown scheme"),
        ("[data]\nsource = 'imagenet'\n", "data.source"),
        ("[deploy]\nrepeats = 0\n", "deploy.repeats"),
        ("seed = 'one'\n", "seed must be an integer"),
        ("search = 3\n", r"\[search\] must be a table"),
        ("seed = \n", "run.toml"),
    ],
)
def test_bad_config_files_raise_config_error(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        config.load_config(_write(tmp_path, text))


def test_resolved_config_reloads_to_the_same_run(tmp_path):
    cfg = config.from_dict(
        {
            "seed": 2,
            "search": {"gamma": "inf", "ops": ["zeroise", "bin_conv_3x3"], "diversity_lambda": 0.0},
            "train": {"scheme": "standard-restarts", "epochs": 5, "use_skip": False},
            "data": {"path": 'C:\\data "cifar"'},
        }
    )
    path = config.write_resolved(cfg, tmp_path / "run")
    assert path.name == config.RESOLVED_NAME
    assert config.load_config(path) == cfg


def test_a_search_seed_of_its_own_survives_the_resolved_config(tmp_path):
    cfg = config.load_config(_write(tmp_path, "seed = 0\n[search]\nseed = 5\n"))
    assert (cfg.seed, cfg.search.seed) == (0, 5)
    text = config.dump_toml(cfg)
    assert "seed = 5" in text
    reloaded = config.load_config(config.write_resolved(cfg, tmp_path / "run"))
    assert reloaded == cfg
    assert (reloaded.seed, reloaded.search.seed) == (0, 5)


def test_a_search_seed_equal_to_the_run_seed_is_not_repeated():
    assert "seed" not in config.to_dict(RunConfig(seed=3).with_overrides(seed=3))["search"]


def test_non_finite_values_other_than_inf_cannot_be_written():
    with pytest.raises(ConfigError, match="cannot write"):
        config._toml_value(float("nan"))


def test_flags_override_the_file():
    cfg = RunConfig().with_overrides(seed=7, preset_name="bnas-d", gamma=3.0, scheme="standard", out="elsewhere")
    assert cfg.seed == 7 and cfg.search.seed == 7
    assert cfg.train.preset == "bnas-d" and cfg.train.scheme == "standard"
    assert cfg.search.gamma == 3.0
    assert cfg.out == "elsewhere"


def test_flag_values_are_validated_too():
    with pytest.raises(ConfigError, match="unknown preset"):
        RunConfig().with_overrides(preset_name="nope")
    with pytest.raises(ConfigError, match="gamma"):
        RunConfig().with_overrides(gamma=0.1)


def test_none_flags_leave_the_config_alone():
    cfg = RunConfig()
    assert cfg.with_overrides() == cfg


def test_train_section_builds_the_network_from_the_preset():
    train = config.TrainConfig(preset="BNAS-B", init_channels=8, use_skip=False)
    net = train.network(num_classes=3, image_side=16)
    assert net.name == "BNAS-B"
    assert net.num_cells == 12  # kept from the preset
    assert net.init_channels == 8
    assert not net.use_skip
    assert (net.num_classes, net.image_side) == (3, 16)


def test_train_section_reports_bad_network_shapes_as_config_errors():
    with pytest.raises(ConfigError, match="even"):
        config.TrainConfig(init_channels=7).network()


def test_train_scheme_rescales_only_when_asked():
    assert config.TrainConfig(scheme="minimal").train_scheme().epochs == 250
    scheme = config.TrainConfig(scheme="minimal-longer", epochs=5, batch_size=16).train_scheme()
    assert scheme.kind == "minimal_reg_longer"
    assert scheme.epochs == 10
    assert scheme.batch_size == 16
