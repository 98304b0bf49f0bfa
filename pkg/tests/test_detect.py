import numpy as np
import pytest
from scipy.special import expit

from rsnet.boxes import GroundTruthBox
from rsnet.data import synthesize
from rsnet.detect import (
    assign_targets,
    center_cell,
    decode_boxes,
    detection_loss,
    encode_box,
    level_for_box,
    predict,
)
from rsnet.errors import DataError, ShapeError
from rsnet.heatmap import as_batch
from rsnet.tensor import Parameter, Tape, Tensor

STRIDES = (8, 16, 32)
SIZE = (64, 64)


def _levels(fill_logit: float = -10.0, batch: int = 1, classes: int = 1):
    levels = []
    for stride in STRIDES:
        grid = SIZE[0] // stride
        levels.append((np.zeros((batch, 4, grid, grid)), np.full((batch, classes, grid, grid), fill_logit)))
    return levels


def test_decode_zero_box_logits_give_one_stride_per_side():
    levels = _levels()
    levels[0][1][0, 0, 2, 3] = 5.0

    (dets,) = decode_boxes(levels, STRIDES, SIZE)

    assert len(dets) == 1
    det = dets[0]
    assert det.confidence == pytest.approx(expit(5.0))
    assert (det.cx, det.cy) == pytest.approx((28 / 64, 20 / 64))
    assert (det.w, det.h) == pytest.approx((16 / 64, 16 / 64))


def test_decode_threshold_is_strict_and_results_sorted():
    levels = _levels()
    levels[0][1][0, 0, 1, 1] = 1.0
    levels[1][1][0, 0, 2, 2] = 3.0
    levels[2][1][0, 0, 0, 0] = 0.0

    (dets,) = decode_boxes(levels, STRIDES, SIZE, conf_threshold=0.5)

    assert [round(d.confidence, 6) for d in dets] == [round(expit(3.0), 6), round(expit(1.0), 6)]


def test_decode_clamps_boxes_to_the_image():
    levels = _levels()
    levels[0][0][0, :, 0, 0] = np.log(4.0)
    levels[0][1][0, 0, 0, 0] = 4.0

    (det,) = decode_boxes(levels, STRIDES, SIZE)[0]

    x1, y1, x2, y2 = det.corners()
    assert (x1, y1) == pytest.approx((0.0, 0.0))
    assert (x2, y2) == pytest.approx((36 / 64, 36 / 64))


def test_decode_needs_one_output_per_stride():
    with pytest.raises(ShapeError, match="2 output levels but 3 strides"):
        decode_boxes(_levels()[:2], STRIDES, SIZE)


@pytest.mark.parametrize("side,level", [(32, 0), (64, 0), (65, 1), (128, 1), (200, 2)])
def test_level_for_box_by_longest_side(side, level):
    box = GroundTruthBox(0, 0.5, 0.5, side / 640, 10 / 640)

    assert level_for_box(box, (640, 640)) == level


def test_encode_then_decode_returns_the_box():
    box = GroundTruthBox(0, 0.45, 0.55, 0.3, 0.2)
    cell = center_cell(box, 8, SIZE, (8, 8))
    levels = _levels()
    levels[0][0][0, :, cell[0], cell[1]] = encode_box(box, cell, 8, SIZE)
    levels[0][1][0, 0, cell[0], cell[1]] = 6.0

    (det,) = decode_boxes(levels, STRIDES, SIZE)[0]

    assert (det.cx, det.cy, det.w, det.h) == pytest.approx((box.cx, box.cy, box.w, box.h))


def test_encode_rejects_cells_outside_the_box():
    box = GroundTruthBox(0, 0.2, 0.2, 0.1, 0.1)

    with pytest.raises(ValueError, match="outside the box"):
        encode_box(box, (7, 7), 8, SIZE)


def test_smaller_box_keeps_a_contested_cell():
    big = GroundTruthBox(0, 0.5, 0.5, 0.5, 0.5)
    small = GroundTruthBox(0, 0.5, 0.5, 0.2, 0.2)

    level0 = assign_targets([[small, big]], STRIDES, [(8, 8), (4, 4), (2, 2)], SIZE)[0]

    assert len(level0.batch) == 1
    # Cell center (36, 36) against the small box spanning 25.6..38.4 px.
    np.testing.assert_allclose(level0.targets[0], np.array([10.4, 10.4, 2.4, 2.4]) / 8)


def test_loss_is_zero_box_term_without_ground_truth():
    levels = [(Tensor(box), Tensor(cls)) for box, cls in _levels()]

    terms = detection_loss(levels, [[]], STRIDES, SIZE)

    assert terms.box.item() == 0.0
    assert terms.cls.item() > 0.0


def test_perfect_box_prediction_has_zero_box_loss():
    box = GroundTruthBox(0, 0.45, 0.55, 0.3, 0.2)
    cell = center_cell(box, 8, SIZE, (8, 8))
    raw = _levels()
    raw[0][0][0, :, cell[0], cell[1]] = encode_box(box, cell, 8, SIZE)
    levels = [(Tensor(b), Tensor(c)) for b, c in raw]

    terms = detection_loss(levels, [[box]], STRIDES, SIZE)

    assert terms.box.item() == pytest.approx(0.0, abs=1e-12)


def test_loss_rejects_class_ids_beyond_the_head():
    levels = [(Tensor(box), Tensor(cls)) for box, cls in _levels()]

    with pytest.raises(DataError, match="class id 1"):
        detection_loss(levels, [[GroundTruthBox(1, 0.5, 0.5, 0.1, 0.1)]], STRIDES, SIZE)


def test_loss_batch_must_match_ground_truth():
    levels = [(Tensor(box), Tensor(cls)) for box, cls in _levels(batch=2)]

    with pytest.raises(ShapeError, match="1 ground-truth lists for a batch of 2"):
        detection_loss(levels, [[]], STRIDES, SIZE)


def test_loss_gradient_reaches_box_and_class_maps():
    box = GroundTruthBox(0, 0.45, 0.55, 0.3, 0.2)
    levels = [(Parameter(b), Parameter(c)) for b, c in _levels(fill_logit=0.0)]

    with Tape() as tape:
        terms = detection_loss(levels, [[box]], STRIDES, SIZE)
    tape.backward(terms.total)

    box_grad, cls_grad = levels[0][0].grad, levels[0][1].grad
    y, x = center_cell(box, 8, SIZE, (8, 8))
    assert np.abs(box_grad[0, :, y, x]).sum() > 0
    assert np.count_nonzero(box_grad) == np.count_nonzero(box_grad[0, :, y, x])
    assert cls_grad[0, 0, y, x] < 0 < cls_grad[0, 0, 0, 0]


def test_predict_returns_suppressed_detections(tiny_model, scene_spec):
    pixels, _ = synthesize(scene_spec, 0)

    (dets,) = predict(tiny_model, as_batch(pixels, 1), conf_threshold=0.0, iou_threshold=0.5)

    assert dets
    assert all(0.0 <= d.cx <= 1.0 and 0.0 <= d.cy <= 1.0 for d in dets)
    assert [d.confidence for d in dets] == sorted((d.confidence for d in dets), reverse=True)
    assert not tiny_model.training


def test_perfect_prediction_has_near_zero_total_loss():
    box = GroundTruthBox(0, 0.45, 0.55, 0.3, 0.2)
    cell = center_cell(box, 8, SIZE, (8, 8))
    raw = _levels(fill_logit=-30.0)
    raw[0][0][0, :, cell[0], cell[1]] = encode_box(box, cell, 8, SIZE)
    raw[0][1][0, 0, cell[0], cell[1]] = 30.0
    levels = [(Tensor(b), Tensor(c)) for b, c in raw]

    terms = detection_loss(levels, [[box]], STRIDES, SIZE)

    assert terms.total.item() < 1e-3
    assert terms.cls.item() < 1e-9


def test_decode_of_negative_infinite_logits_is_empty():
    levels = _levels(fill_logit=-np.inf, batch=2)

    assert decode_boxes(levels, STRIDES, SIZE) == [[], []]
    assert decode_boxes(levels, STRIDES, SIZE, conf_threshold=0.0) == [[], []]


def test_zero_threshold_keeps_every_cell_of_every_class():
    levels = _levels(fill_logit=-10.0, classes=2)
    cells = sum((SIZE[0] // s) * (SIZE[1] // s) for s in STRIDES)

    (dets,) = decode_boxes(levels, STRIDES, SIZE, conf_threshold=0.0)

    assert len(dets) == 2 * cells
    assert sum(d.class_id == 1 for d in dets) == cells
    assert all(d.w > 0 and d.h > 0 for d in dets)
