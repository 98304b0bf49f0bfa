from dataclasses import replace

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from rsnet.boxes import Detection, GroundTruthBox, iou
from rsnet.checks import hand_built_case, random_case
from rsnet.errors import DataError
from rsnet.metrics import IOU_THRESHOLDS, brute_force_ap, envelope_ap, evaluate, exhaustive_nms, match_image, nms
from rsnet.rng import Rng

detections = st.lists(
    st.builds(
        Detection,
        class_id=st.integers(0, 1),
        confidence=st.floats(0.01, 1.0),
        cx=st.floats(0.2, 0.8),
        cy=st.floats(0.2, 0.8),
        w=st.floats(0.05, 0.4),
        h=st.floats(0.05, 0.4),
    ),
    max_size=9,
)


def test_iou_thresholds():
    assert IOU_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


def test_iou_of_boxes():
    a = GroundTruthBox(0, 0.5, 0.5, 0.2, 0.2)

    assert iou(a, a) == pytest.approx(1.0)
    assert iou(a, Detection(0, 1.0, 0.6, 0.5, 0.2, 0.2)) == pytest.approx(1 / 3)
    assert iou(a, Detection(0, 1.0, 0.9, 0.9, 0.1, 0.1)) == 0.0


def test_nms_suppresses_only_same_class_overlaps():
    strong = Detection(0, 0.9, 0.5, 0.5, 0.2, 0.2)
    shadow = Detection(0, 0.8, 0.51, 0.5, 0.2, 0.2)
    other_class = Detection(1, 0.7, 0.5, 0.5, 0.2, 0.2)

    assert nms([shadow, other_class, strong], 0.5) == [strong, other_class]


def test_nms_threshold_is_strict():
    a = GroundTruthBox(0, 0.5, 0.5, 0.2, 0.2)
    first = Detection(0, 0.9, 0.5, 0.5, 0.2, 0.2)
    second = Detection(0, 0.8, 0.6, 0.5, 0.2, 0.2)
    overlap = iou(a, second)

    assert len(nms([first, second], overlap)) == 2
    assert len(nms([first, second], overlap - 1e-9)) == 1


@settings(max_examples=150, deadline=None)
@given(dets=detections, threshold=st.floats(0.1, 0.9))
def test_greedy_nms_matches_subset_enumeration(dets, threshold):
    assert nms(dets, threshold) == exhaustive_nms(dets, threshold)


@settings(max_examples=100, deadline=None)
@given(dets=detections, threshold=st.floats(0.1, 0.9))
def test_nms_output_is_conflict_free_and_stable(dets, threshold):
    kept = nms(dets, threshold)

    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            assert a.class_id != b.class_id or iou(a, b) <= threshold
    assert nms(kept, threshold) == kept


def test_exhaustive_nms_refuses_large_inputs():
    with pytest.raises(ValueError, match="too many"):
        exhaustive_nms([Detection(0, 0.5, 0.5, 0.5, 0.1, 0.1)] * 17, 0.5)


def test_hand_built_case():
    dets, truth, expected = hand_built_case()

    result = evaluate(dets, truth)

    assert result.map50 == pytest.approx(5 / 9)
    assert expected == pytest.approx(5 / 9)
    assert brute_force_ap(dets, truth, 0, 0.5) == pytest.approx(5 / 9)


def test_matching_prefers_highest_iou_then_earliest_box():
    left = GroundTruthBox(0, 0.3, 0.5, 0.2, 0.2)
    twin = GroundTruthBox(0, 0.3, 0.5, 0.2, 0.2)
    det = Detection(0, 0.9, 0.3, 0.5, 0.2, 0.2)
    second = Detection(0, 0.8, 0.3, 0.5, 0.2, 0.2)

    flags = match_image([second, det], [left, twin], 0, 0.5)

    assert flags == [(0.9, True), (0.8, True)]
    assert match_image([det, second], [left], 0, 0.5) == [(0.9, True), (0.8, False)]


def test_envelope_ap_values():
    assert envelope_ap([True, True], 2)[0] == pytest.approx(1.0)
    assert envelope_ap([False, True], 1)[0] == pytest.approx(0.5)
    assert envelope_ap([], 3)[0] == 0.0
    assert envelope_ap([True], 0)[0] == 0.0


def test_classes_without_ground_truth_are_left_out_of_the_mean():
    ship = GroundTruthBox(0, 0.5, 0.5, 0.2, 0.2)
    dets = {"a": [Detection(0, 0.9, 0.5, 0.5, 0.2, 0.2), Detection(3, 0.8, 0.2, 0.2, 0.1, 0.1)]}

    result = evaluate(dets, {"a": [ship]})

    assert result.num_truth == {0: 1, 3: 0}
    assert result.map50 == pytest.approx(1.0)


def test_detections_on_unknown_images_are_rejected():
    with pytest.raises(DataError, match="without ground truth: ghost"):
        evaluate({"ghost": []}, {"a": []})


def test_duplicate_image_ids_are_rejected():
    with pytest.raises(DataError, match="duplicate image id 'a'"):
        evaluate([("a", [])], [("a", []), ("a", [])])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_evaluator_matches_brute_force(seed):
    dets, truth = random_case(Rng(seed, "metrics-test"))

    result = evaluate(dets, truth)

    assert result.map50_95 <= result.map50 + 1e-12
    for cls, aps in result.per_class.items():
        for index in (0, 5, 9):
            assert aps[index] == pytest.approx(brute_force_ap(dets, truth, cls, IOU_THRESHOLDS[index]), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_ap_ignores_order_preserving_confidence_changes(seed):
    dets, truth = random_case(Rng(seed, "metrics-test"))
    squashed = {k: [replace(d, confidence=d.confidence ** 3 / 2) for d in ds] for k, ds in dets.items()}

    assert evaluate(squashed, truth).per_class == evaluate(dets, truth).per_class


def test_parallel_matching_gives_the_same_result():
    dets, truth = random_case(Rng(11, "metrics-test"))
    dets = {**dets, **{f"extra{i}": [] for i in range(3)}}
    truth = {**truth, **{f"extra{i}": [GroundTruthBox(0, 0.5, 0.5, 0.1, 0.1)] for i in range(3)}}

    assert evaluate(dets, truth, workers=4).per_class == evaluate(dets, truth, workers=1).per_class


def _tied_case():
    ship = GroundTruthBox(0, 0.5, 0.5, 0.2, 0.2)
    truth = {"a": [ship], "b": [ship]}
    dets = {
        "a": [Detection(0, 1.0, 0.5, 0.5, 0.2, 0.2)],
        "b": [Detection(0, 1.0, 0.1, 0.1, 0.1, 0.1), Detection(0, 0.5, 0.5, 0.5, 0.2, 0.2)],
    }
    return dets, truth


def test_tied_confidences_form_one_cutoff():
    dets, truth = _tied_case()
    reordered_dets = dict(reversed(list(dets.items())))
    reordered_truth = dict(reversed(list(truth.items())))

    forward = evaluate(dets, truth).map50
    backward = evaluate(reordered_dets, reordered_truth).map50

    # cutoff 1.0: one hit, one miss; cutoff 0.5: two hits of three
    assert forward == pytest.approx(2 / 3)
    assert backward == forward
    assert brute_force_ap(dets, truth, 0, 0.5) == pytest.approx(2 / 3)


def test_envelope_ap_merges_equal_confidences():
    assert envelope_ap([True, False], 1)[0] == pytest.approx(1.0)
    assert envelope_ap([True, False], 1, [0.7, 0.7])[0] == pytest.approx(0.5)
    with pytest.raises(ValueError, match="confidences"):
        envelope_ap([True, False], 1, [0.7])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_evaluator_matches_brute_force_with_tied_confidences(seed):
    dets, truth = random_case(Rng(seed, "metrics-ties"))
    coarse = {k: [replace(d, confidence=round(d.confidence, 1)) for d in ds] for k, ds in dets.items()}
    reversed_truth = dict(reversed(list(truth.items())))

    result = evaluate(coarse, truth)

    assert evaluate(coarse, reversed_truth).per_class == result.per_class
    for cls, aps in result.per_class.items():
        for index in (0, 5, 9):
            assert aps[index] == pytest.approx(brute_force_ap(coarse, truth, cls, IOU_THRESHOLDS[index]), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_duplicate_detection_never_raises_ap(seed):
    dets, truth = random_case(Rng(seed, "metrics-duplicate"))
    image = next((k for k, ds in dets.items() if ds), None)
    assume(image is not None)
    copied = dets[image][0]
    # only one box the copy could match, so the original already holds it or lost it earlier
    assume(sum(g.class_id == copied.class_id and iou(copied, g) >= 0.5 for g in truth[image]) <= 1)
    doubled = {**dets, image: [*dets[image], copied]}

    before, after = evaluate(dets, truth), evaluate(doubled, truth)

    for cls, aps in after.per_class.items():
        for index, ap in enumerate(aps):
            assert ap <= before.per_class[cls][index] + 1e-12


def test_no_detections_give_zero_ap():
    truth = {"a": [GroundTruthBox(0, 0.5, 0.5, 0.2, 0.2)], "b": []}

    result = evaluate({}, truth)

    assert result.per_class == {0: (0.0,) * len(IOU_THRESHOLDS)}
    assert result.map50 == 0.0
    assert result.map50_95 == 0.0
