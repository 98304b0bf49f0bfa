import pytest

from rsnet.checks import tiny_config
from rsnet.errors import ConfigError
from rsnet.model import build_model, count_params
from rsnet.tuning import tune_widths

GRID = dict(stage_multipliers=(1.0, 2.0), neck_multipliers=(1.0,), head_multipliers=(1.0, 2.0))


def _params(cfg):
    return count_params(build_model(cfg)).total_params


def test_grid_counts_every_distinct_point():
    result = tune_widths(tiny_config(), target=10_000, **GRID)

    assert len(result.candidates) == 4
    assert {(c.stage_top, c.head_hidden) for c in result.candidates} == {(32, 16), (32, 32), (64, 16), (64, 32)}
    # neck widths are rounded up to multiples of 16
    assert all(c.neck_widths == (16, 16, 32) for c in result.candidates)


def test_best_candidate_is_nearest_the_target():
    base = tiny_config()
    wanted = base.replace(stages=(8, 16, 64), neck_widths=(16, 16, 32), head_hidden=32)

    result = tune_widths(base, target=_params(wanted), **GRID)

    assert result.best.gap(result.target) == 0
    tuned = result.apply(base)
    assert tuned.stages == (8, 16, 64)
    assert tuned.neck_widths == (16, 16, 32)
    assert tuned.head_hidden == 32
    assert _params(tuned) == result.target


def test_candidate_params_match_a_direct_count():
    base = tiny_config()
    result = tune_widths(base, target=10_000, **GRID)

    for c in result.candidates:
        cfg = base.replace(stages=(8, 16, c.stage_top), neck_widths=c.neck_widths, head_hidden=c.head_hidden)
        assert c.params == _params(cfg)
        assert c.flops > 0


@pytest.mark.parametrize("target", [0, -5])
def test_target_must_be_positive(target):
    with pytest.raises(ConfigError, match="must be positive"):
        tune_widths(tiny_config(), target=target, **GRID)
