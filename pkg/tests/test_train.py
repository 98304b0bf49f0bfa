import csv
import logging

import numpy as np
import pytest

from rsnet.checkpoint import load_checkpoint
from rsnet.data import synthesize
from rsnet.errors import ConfigError, NumericError
from rsnet.optim import OptimizerState
from rsnet.train import LOSS_COLUMNS, StepLoss, TrainOptions, TrainResult, epoch_order, overfit, steps_per_epoch, train


def _rows(path):
    with path.open(newline="", encoding="utf-8") as handle:
        return list(csv.reader(handle))


@pytest.mark.slow
def test_overfitting_one_image(tiny_model, scene_spec):
    pixels, boxes = synthesize(scene_spec, 0)

    result = overfit(tiny_model, pixels, boxes, steps=200, lr=0.005)

    assert len(result.history) == 200
    assert result.falling_fraction >= 0.9
    assert result.last_loss < 0.1 * result.first_loss
    assert all(np.isfinite(step.total) for step in result.history)


def test_train_writes_loss_log_and_checkpoint(tmp_path, tiny_model, small_dataset):
    out = tmp_path / "run"

    result = train(tiny_model, small_dataset, TrainOptions(epochs=1, batch_size=2, lr=0.005), out_dir=out)

    rows = _rows(out / "loss.csv")
    assert tuple(rows[0]) == LOSS_COLUMNS
    assert [row[0] for row in rows[1:]] == ["1", "2"]
    assert result.optimizer.step == 2
    assert result.checkpoint == out / "model.ckpt"
    assert load_checkpoint(result.checkpoint).optimizer.step == 2


def test_resume_continues_the_step_counter(tmp_path, tiny_model, small_dataset):
    out = tmp_path / "run"
    options = TrainOptions(epochs=1, batch_size=2)
    train(tiny_model, small_dataset, options, out_dir=out)
    saved = load_checkpoint(out / "model.ckpt")

    result = train(saved.model, small_dataset, TrainOptions(epochs=2, batch_size=2), saved.optimizer, out_dir=out)

    assert [step.step for step in result.history] == [3, 4]
    rows = _rows(out / "loss.csv")
    assert [row[0] for row in rows] == ["step", "1", "2", "3", "4"]


def test_finished_run_does_nothing(tmp_path, tiny_model, small_dataset, caplog):
    out = tmp_path / "run"
    first = train(tiny_model, small_dataset, TrainOptions(epochs=1, batch_size=4), out_dir=out)

    with caplog.at_level(logging.WARNING, logger="rsnet.train"):
        again = train(tiny_model, small_dataset, TrainOptions(epochs=1, batch_size=4), first.optimizer, out_dir=out)

    assert again.history == ()
    assert "nothing to do" in caplog.text


def test_divergence_is_reported_with_the_layer(tiny_model, small_dataset, caplog):
    tiny_model.head.towers[0].cls.weight.data[...] = np.inf

    with caplog.at_level(logging.ERROR, logger="rsnet.train"), pytest.raises(NumericError) as info:
        train(tiny_model, small_dataset, TrainOptions(epochs=1, batch_size=2))

    assert info.value.layer is not None
    assert "diverged" in caplog.text


def test_epoch_order_is_a_seeded_permutation():
    order = epoch_order(10, 0, seed=1)

    assert sorted(order) == list(range(10))
    np.testing.assert_array_equal(order, epoch_order(10, 0, seed=1))
    assert not np.array_equal(order, epoch_order(10, 1, seed=1))


def test_steps_per_epoch_rounds_up():
    assert steps_per_epoch(5, 2) == 3
    assert steps_per_epoch(4, 2) == 2


@pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(batch_size=0), dict(lr=0.0), dict(warmup_steps=-1)])
def test_invalid_train_options(kwargs):
    with pytest.raises(ConfigError):
        TrainOptions(**kwargs)


def test_falling_fraction_counts_decreasing_steps():
    totals = [5.0, 4.0, 4.5, 3.0, 2.0]
    history = tuple(StepLoss(i + 1, 0.01, t, t, 0.0) for i, t in enumerate(totals))

    result = TrainResult(history, OptimizerState(), None)

    assert result.falling_fraction == pytest.approx(3 / 4)
    assert np.isnan(TrainResult(history[:1], OptimizerState(), None).falling_fraction)
