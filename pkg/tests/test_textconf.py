import pytest

from rsnet.errors import ConfigError
from rsnet.textconf import TextConfig, dump


def test_parse_skips_comments_and_blank_lines():
    conf = TextConfig.parse("# header\n\nname = demo  # trailing\nsizes = 1, 2, 3\n")

    assert conf.get_str("name") == "demo"
    assert conf.get_int_list("sizes") == (1, 2, 3)
    conf.finish()


def test_line_without_equals_reports_location():
    with pytest.raises(ConfigError, match=r"demo.cfg:2: expected 'key = value'"):
        TextConfig.parse("a = 1\njust words\n", source="demo.cfg")


def test_duplicate_key_is_rejected():
    with pytest.raises(ConfigError, match="duplicate key 'a'"):
        TextConfig.parse("a = 1\na = 2\n")


def test_finish_names_unknown_keys_with_line():
    conf = TextConfig.parse("known = 1\ntypo = 2\n", source="x.cfg")
    conf.get_int("known")

    with pytest.raises(ConfigError, match=r"unknown keys: 'typo' \(x.cfg:2\)"):
        conf.finish()


def test_malformed_integer():
    conf = TextConfig.parse("depth = two\n")

    with pytest.raises(ConfigError, match="'depth' must be an integer"):
        conf.get_int("depth")


def test_missing_required_key():
    conf = TextConfig.parse("")

    with pytest.raises(ConfigError, match="missing required key 'name'"):
        conf.get_str("name")


def test_defaults_are_used_when_key_absent():
    conf = TextConfig.parse("")

    assert conf.get_int("depth", 3) == 3
    assert conf.get_float("rate", 0.5) == 0.5
    assert conf.get_bool("flag", True) is True
    assert conf.get_float_list("ranges", (64.0, 128.0)) == (64.0, 128.0)


@pytest.mark.parametrize("raw,expected", [("yes", True), ("ON", True), ("1", True), ("off", False), ("No", False)])
def test_bool_spellings(raw, expected):
    assert TextConfig.parse(f"flag = {raw}\n").get_bool("flag") is expected


def test_bad_bool_and_choice():
    conf = TextConfig.parse("flag = maybe\nmode = fast\n")

    with pytest.raises(ConfigError, match="must be true or false"):
        conf.get_bool("flag")
    with pytest.raises(ConfigError, match="must be one of"):
        conf.get_choice("mode", ("slow", "medium"))


def test_dump_is_parseable():
    text = dump([("name", "x"), ("sizes", (8, 16)), ("shared", False), ("rate", 0.25)])

    assert text == "name = x\nsizes = 8, 16\nshared = false\nrate = 0.25\n"
    conf = TextConfig.parse(text)
    assert conf.get_int_list("sizes") == (8, 16)
    assert conf.get_bool("shared") is False
    assert conf.get_float("rate") == 0.25
