import numpy as np
import pytest

from rsnet.boxes import Detection, GroundTruthBox
from rsnet.data import synthesize
from rsnet.errors import ConfigError, DataError
from rsnet.heatmap import as_batch, export_heatmap, feature_heatmap, peak_in_box
from rsnet.model import DEFAULT_HEATMAP_LAYER
from rsnet.pgm import annotate, read_pgm, write_pgm


def test_pgm_round_trip(tmp_path):
    pixels = np.arange(64 * 48, dtype=np.uint32).reshape(48, 64).astype(np.uint8)

    path = write_pgm(tmp_path / "img.pgm", pixels)

    assert path.read_bytes().startswith(b"P5")
    np.testing.assert_array_equal(read_pgm(path), pixels)


def test_read_pgm_rejects_other_formats(tmp_path):
    path = tmp_path / "plain.pgm"
    path.write_bytes(b"P2\n2 2\n255\n0 1 2 3\n")

    with pytest.raises(DataError, match="not a binary PGM"):
        read_pgm(path)


def test_write_pgm_needs_8_bit_gray(tmp_path):
    with pytest.raises(ValueError, match="2-D uint8"):
        write_pgm(tmp_path / "x.pgm", np.zeros((4, 4), dtype=np.float32))


def test_annotate_draws_box_outline():
    pixels = np.zeros((20, 20), dtype=np.uint8)

    out = annotate(pixels, [Detection(0, 0.9, 0.5, 0.5, 0.5, 0.5)])

    assert out[5, 5] == 255 and out[5, 14] == 255 and out[14, 5] == 255
    assert out[10, 10] == 0
    assert pixels.max() == 0


def test_as_batch_scales_and_repeats_channels():
    batch = as_batch(np.full((4, 4), 255, dtype=np.uint8), channels=3)

    assert batch.shape == (1, 3, 4, 4)
    assert batch.dtype == np.float32
    assert batch.max() == 1.0
    with pytest.raises(ConfigError, match="3-channel"):
        as_batch(np.zeros((2, 4, 4), dtype=np.uint8), channels=3)


def test_heatmap_matches_image_size(tiny_model, scene_spec):
    pixels, _ = synthesize(scene_spec, 0)
    tiny_model.train()

    heat = feature_heatmap(tiny_model, pixels, DEFAULT_HEATMAP_LAYER)

    assert heat.shape == pixels.shape
    assert heat.dtype == np.uint8
    assert heat.max() > heat.min()
    assert tiny_model.training


def test_heatmap_of_unknown_layer(tiny_model):
    with pytest.raises(ConfigError, match="unknown layer 'neck.nowhere'"):
        feature_heatmap(tiny_model, np.zeros((64, 64), dtype=np.uint8), "neck.nowhere")


def test_export_writes_pgm(tmp_path, tiny_model, scene_spec):
    pixels, _ = synthesize(scene_spec, 1)

    heat = export_heatmap(tiny_model, pixels, "backbone.stages.0", tmp_path / "heat.pgm")

    np.testing.assert_array_equal(read_pgm(tmp_path / "heat.pgm"), heat)


def test_peak_in_box():
    heat = np.zeros((10, 10), dtype=np.uint8)
    heat[2, 7] = 255

    assert peak_in_box(heat, [GroundTruthBox(0, 0.75, 0.25, 0.2, 0.2)])
    assert not peak_in_box(heat, [GroundTruthBox(0, 0.25, 0.75, 0.2, 0.2)])
