import pytest

from mixsize.config import ConfigError, RunConfig, apply_override, dump_config, load_config, parse_config_text


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.optim.lr == 0.1 and cfg.regime.mode == "fixed"
    assert cfg.distribution().entries == [(32, 1.0)]
    assert cfg.distribution().base_batch == 64


def test_dotted_keys_and_tables():
    cfg = parse_config_text('''
model.depth = 20
regime.preset = "cifar28"
regime.mode = "B_plus"

[optim]
milestones = [10, 20]
smoothing = "off"
''')
    assert cfg.model.depth == 20 and cfg.optim.milestones == [10, 20]
    d = cfg.distribution()
    assert d.mode == "B_plus" and d.sizes.tolist() == [40, 32, 24, 16]
    assert not cfg.smoothing_enabled() and cfg.lr_scaling_enabled()


def test_auto_switches_follow_mode():
    cfg = RunConfig()
    cfg.regime.preset, cfg.regime.mode = "cifar28", "D_plus"
    assert not cfg.smoothing_enabled() and not cfg.lr_scaling_enabled()
    cfg.regime.mode = "B_plus"
    assert cfg.smoothing_enabled() and cfg.lr_scaling_enabled()


def test_preset_keeps_its_base_unless_overridden():
    cfg = parse_config_text('regime.preset = "imagenet144"')
    assert cfg.distribution().base_size == 224
    apply_override(cfg, "regime.base_batch=128")
    assert cfg.distribution().base_batch == 128


@pytest.mark.parametrize("text", ["model.colour = 3", "nosuch.depth = 1", 'model.depth = "x"',
                                  "model.depth = 2.5", "model.depth = = 1"])
def test_rejects_bad_files(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_validation_errors():
    for ov in ["regime.mode=C_plus", "regime.entries=32:0.5", "run.precision=float16", "run.epochs=0",
               "regime.preset=cifar99"]:
        with pytest.raises(ConfigError):
            load_config(None, [ov])


def test_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('run.epochs = 3\nregime.entries = "32:0.5, 16:0.5"\n')
    cfg = load_config(p, ["run.epochs=5", "optim.smoothing=true", "regime.mode=D_plus", "run.out_dir=out/x"])
    assert cfg.run.epochs == 5 and cfg.optim.smoothing == "true" and cfg.run.out_dir == "out/x"
    with pytest.raises(ConfigError):
        apply_override(cfg, "novalue")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def test_dump_roundtrip():
    cfg = load_config(None, ['regime.entries="40:0.5,16:0.5"', "optim.milestones=[3,6]", "run.seed=7"])
    again = parse_config_text(dump_config(cfg))
    assert again == cfg
