import pytest

from rsnet.arch import ABLATION_CONFIGS, ArchConfig, load_config, named_configs
from rsnet.errors import ConfigError


def test_shipped_configs_load():
    names = named_configs()

    assert set(ABLATION_CONFIGS) <= set(names)
    assert "rsnet-desk" in names
    for name in names:
        assert load_config(name).name == name


def test_reference_config_values():
    cfg = load_config("rsnet-ref")

    assert cfg.input_size == (640, 640)
    assert cfg.in_channels == 3
    assert cfg.strides == (8, 16, 32)
    assert cfg.downsample == "wavelet"
    assert cfg.neck == "wsf"
    assert cfg.head_shared is True


def test_text_round_trip_keeps_config():
    cfg = load_config("rsnet-wcg")

    assert ArchConfig.parse(cfg.to_text()) == cfg


def test_unknown_config_name():
    with pytest.raises(ConfigError, match="unknown config 'rsnet-nope'"):
        load_config("rsnet-nope")


def test_unknown_key_in_config_file(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("name = bad\nstagez = 8, 16, 32\n", encoding="utf-8")

    with pytest.raises(ConfigError, match="unknown keys: 'stagez'"):
        load_config(path)


def test_config_path_that_cannot_be_read(tmp_path):
    with pytest.raises(ConfigError, match="cannot read config"):
        load_config(tmp_path / "missing.cfg")


@pytest.mark.parametrize(
    "changes,message",
    [
        (dict(input_size=(100, 100)), "divisible by 32"),
        (dict(stages=(64, 128)), "exactly 3 entries"),
        (dict(stages=(64, 129, 384)), "must be even"),
        (dict(strides=(4, 8, 16)), "do not match"),
        (dict(head_hidden=24), "group-norm groups"),
        (dict(stages=(64, 128, 386)), "divisible by 4"),
        (dict(star_drop=1.0), "star_drop"),
        (dict(downsample="maxpool"), "downsample must be one of"),
    ],
)
def test_invalid_configs_are_rejected(changes, message):
    with pytest.raises(ConfigError, match=message):
        ArchConfig(**changes)


def test_digest_ignores_name_and_input_size():
    cfg = load_config("rsnet-ref")

    assert cfg.replace(name="other", input_size=(320, 320)).digest() == cfg.digest()
    assert cfg.replace(head_hidden=64).digest() != cfg.digest()
