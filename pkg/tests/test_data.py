import numpy as np
import pytest

from rsnet.boxes import GroundTruthBox
from rsnet.data import (
    MANIFEST,
    Dataset,
    SyntheticSceneSpec,
    apply_speckle,
    generate_dataset,
    read_labels,
    render_scene,
    synthesize,
)
from rsnet.errors import ConfigError, DataError
from rsnet.rng import Rng
from rsnet.textconf import TextConfig


def test_generation_is_byte_identical_for_a_seed(tmp_path, scene_spec):
    first = generate_dataset(scene_spec, 3, tmp_path / "a")
    second = generate_dataset(scene_spec, 3, tmp_path / "b")

    for rel in ("images/000002.pgm", "labels/000002.txt", MANIFEST):
        assert (first / rel).read_bytes() == (second / rel).read_bytes()


def test_different_seed_changes_images(scene_spec):
    a, _ = synthesize(scene_spec, 0)
    b, _ = synthesize(scene_spec.with_seed(4), 0)

    assert not np.array_equal(a, b)


def test_dataset_layout_and_loading(small_dataset):
    assert len(small_dataset) == 4
    assert small_dataset.image_size == (64, 64)
    pixels, boxes = small_dataset.load(0)
    assert pixels.dtype == np.uint8
    assert len(boxes) == 1
    assert [s.image_id for s in small_dataset.samples] == ["000000", "000001", "000002", "000003"]


def test_labels_cover_the_bright_ship(scene_spec):
    clean, boxes = render_scene(scene_spec, Rng(0, "data-test"))

    (box,) = boxes
    x1, y1, x2, y2 = (int(v * 64) for v in box.corners())
    inside = clean[y1:y2 + 1, x1:x2 + 1]
    assert inside.max() > 150
    assert np.median(clean) < 100


def test_speckle_has_unit_mean():
    clean = np.full((256, 256), 100.0)

    noisy = apply_speckle(clean, looks=4.0, rng=Rng(0, "speckle"))

    assert noisy.dtype == np.uint8
    assert noisy.mean() == pytest.approx(100.0, rel=0.02)
    # Gamma(L, 1/L) has variance 1/L.
    assert noisy.astype(float).std() == pytest.approx(50.0, rel=0.05)


def test_non_empty_output_needs_force(tmp_path, scene_spec):
    out = generate_dataset(scene_spec, 1, tmp_path / "data")

    with pytest.raises(DataError, match="not empty"):
        generate_dataset(scene_spec, 1, out)
    generate_dataset(scene_spec, 2, out, force=True)
    assert len(Dataset.open(out)) == 2


def test_scene_spec_round_trips_through_text(scene_spec):
    assert SyntheticSceneSpec.from_text(TextConfig.parse(scene_spec.to_text())) == scene_spec


@pytest.mark.parametrize(
    "changes,message",
    [
        (dict(image_size=8), "image_size"),
        (dict(ship_count=(3, 1)), "ordered"),
        (dict(ship_length=(100.0, 200.0)), "do not fit"),
        (dict(looks=0.0), "looks"),
        (dict(clutter_prob=1.5), "clutter_prob"),
    ],
)
def test_invalid_scene_specs(changes, message):
    with pytest.raises(ConfigError, match=message):
        SyntheticSceneSpec(**changes)


def test_read_labels_reports_bad_lines(tmp_path):
    path = tmp_path / "x.txt"
    path.write_text("0 0.5 0.5 0.1 0.1\n0 0.5 0.5\n", encoding="utf-8")

    with pytest.raises(DataError, match=r"x.txt:2: expected 'class cx cy w h'"):
        read_labels(path)

    path.write_text("0 0.5 0.5 0.0 0.1\n", encoding="utf-8")
    with pytest.raises(DataError, match="degenerate box"):
        read_labels(path)


def test_read_labels_parses_boxes(tmp_path):
    path = tmp_path / "y.txt"
    path.write_text("0 0.500000 0.250000 0.100000 0.200000\n\n", encoding="utf-8")

    assert read_labels(path) == [GroundTruthBox(0, 0.5, 0.25, 0.1, 0.2)]


def test_manifest_problems(tmp_path):
    with pytest.raises(DataError, match="cannot read dataset manifest"):
        Dataset.open(tmp_path)

    (tmp_path / MANIFEST).write_text("images/a.pgm labels/a.txt\nimages/a.pgm labels/b.txt\n", encoding="utf-8")
    with pytest.raises(DataError, match="duplicate image id 'a'"):
        Dataset.open(tmp_path)

    (tmp_path / MANIFEST).write_text("\n", encoding="utf-8")
    with pytest.raises(DataError, match="is empty"):
        Dataset.open(tmp_path)


def test_many_looks_leave_the_clean_image_almost_unchanged():
    clean = np.tile(np.linspace(0.0, 250.0, 256), (256, 1))

    noisy = apply_speckle(clean, looks=1e6, rng=Rng(0, "speckle"))

    diff = np.abs(noisy.astype(float) - np.rint(clean))
    assert diff.max() <= 2
    assert diff.mean() < 0.2
