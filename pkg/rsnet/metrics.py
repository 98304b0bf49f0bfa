"""Non-maximum suppression and COCO-style average precision.

AP uses all-point interpolation of the precision envelope. Matching is greedy per
image: detections in descending confidence each take the unmatched ground-truth box
of highest IoU at or above the threshold, ties going to the earliest box.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from rsnet.boxes import Detection, GroundTruthBox, iou
from rsnet.errors import DataError

logger = logging.getLogger("rsnet.metrics")

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def _rank_key(det: Detection):
    return -det.confidence, det.cx


def nms(detections: Iterable[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression of overlaps strictly above ``iou_threshold``."""
    kept: list[Detection] = []
    for det in sorted(detections, key=_rank_key):
        if all(k.class_id != det.class_id or iou(k, det) <= iou_threshold for k in kept):
            kept.append(det)
    return kept


def exhaustive_nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Reference NMS by subset enumeration: the conflict-free subset that ranks highest
    when compared member by member in confidence order. Exponential; small inputs only."""
    ranked = sorted(detections, key=_rank_key)
    n = len(ranked)
    if n > 16:
        raise ValueError(f"exhaustive_nms enumerates 2^n subsets; {n} detections is too many")
    conflicts = [
        [i != j and ranked[i].class_id == ranked[j].class_id and iou(ranked[i], ranked[j]) > iou_threshold
         for j in range(n)]
        for i in range(n)
    ]
    best_key, best = -1, []
    for mask in range(1 << n):
        members = [i for i in range(n) if mask >> i & 1]
        if any(conflicts[i][j] for i in members for j in members):
            continue
        key = sum(1 << (n - 1 - i) for i in members)
        if key > best_key:
            best_key, best = key, members
    return [ranked[i] for i in best]


ImageDetections = Mapping[str, Sequence[Detection]] | Sequence[tuple[str, Sequence[Detection]]]
ImageTruth = Mapping[str, Sequence[GroundTruthBox]] | Sequence[tuple[str, Sequence[GroundTruthBox]]]


def _index(items, what: str) -> dict[str, list]:
    if isinstance(items, Mapping):
        return {key: list(value) for key, value in items.items()}
    indexed: dict[str, list] = {}
    for image_id, values in items:
        if image_id in indexed:
            raise DataError(f"duplicate image id '{image_id}' in {what}")
        indexed[image_id] = list(values)
    return indexed


def match_image(
    detections: Sequence[Detection], truth: Sequence[GroundTruthBox], class_id: int, threshold: float
) -> list[tuple[float, bool]]:
    """(confidence, is_true_positive) for one image's detections of ``class_id``, in rank order."""
    boxes = [g for g in truth if g.class_id == class_id]
    used = [False] * len(boxes)
    flags = []
    for det in sorted((d for d in detections if d.class_id == class_id), key=_rank_key):
        best, best_iou = -1, threshold
        for index, box in enumerate(boxes):
            if used[index]:
                continue
            overlap = iou(det, box)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = index, overlap
        if best >= 0:
            used[best] = True
        flags.append((det.confidence, best >= 0))
    return flags


def envelope_ap(
    flags: Sequence[bool], num_truth: int, confidences: Sequence[float] | None = None
) -> tuple[float, np.ndarray, np.ndarray]:
    """All-point interpolated AP of ranked TP flags; also returns recall and precision.

    With ``confidences`` (descending, one per flag) a run of equal confidences is one
    cutoff: only its last rank contributes a precision/recall point.
    """
    if num_truth == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    ranks = np.arange(1, len(flags) + 1, dtype=np.float64)
    recall = tp / num_truth
    precision = tp / ranks if len(flags) else np.zeros(0)
    if confidences is not None and len(flags):
        scores = np.asarray(confidences, dtype=np.float64)
        if scores.shape != recall.shape:
            raise ValueError(f"expected {len(flags)} confidences, got {scores.shape}")
        cutoffs = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
        recall, precision = recall[cutoffs], precision[cutoffs]
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(flags) else precision
    ap = 0.0
    previous = 0.0
    for r, p in zip(recall, envelope):
        if r > previous:
            ap += (r - previous) * p
            previous = r
    return float(ap), recall, precision


@dataclass(frozen=True)
class APResult:
    thresholds: tuple[float, ...]
    per_class: dict[int, tuple[float, ...]]
    num_truth: dict[int, int]
    pr_curves: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, compare=False)

    @property
    def map50(self) -> float:
        return self.mean_at(0)

    @property
    def map50_95(self) -> float:
        return float(np.mean([self.mean_at(i) for i in range(len(self.thresholds))])) if self.thresholds else 0.0

    def mean_at(self, index: int) -> float:
        scored = [aps[index] for cls, aps in self.per_class.items() if self.num_truth.get(cls, 0) > 0]
        return float(np.mean(scored)) if scored else 0.0


def evaluate(
    detections: ImageDetections,
    ground_truth: ImageTruth,
    thresholds: Sequence[float] = IOU_THRESHOLDS,
    workers: int = 1,
) -> APResult:
    """Per-class AP at every IoU threshold; classes without ground truth are left out of the means."""
    dets = _index(detections, "detections")
    truth = _index(ground_truth, "ground truth")
    unknown = sorted(set(dets) - set(truth))
    if unknown:
        raise DataError(f"detections for images without ground truth: {', '.join(unknown[:5])}")
    image_ids = list(truth)
    classes = sorted({g.class_id for boxes in truth.values() for g in boxes}
                     | {d.class_id for ds in dets.values() for d in ds})

    def match_all(image_id: str):
        return {
            (cls, t): match_image(dets.get(image_id, []), truth[image_id], cls, t)
            for cls in classes for t in thresholds
        }

    if workers > 1 and len(image_ids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            matched = list(pool.map(match_all, image_ids))
    else:
        matched = [match_all(image_id) for image_id in image_ids]

    per_class: dict[int, tuple[float, ...]] = {}
    num_truth: dict[int, int] = {}
    curves: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for cls in classes:
        num_truth[cls] = sum(1 for boxes in truth.values() for g in boxes if g.class_id == cls)
        aps = []
        for t_index, t in enumerate(thresholds):
            ranked = [flag for per_image in matched for flag in per_image[(cls, t)]]
            ranked.sort(key=lambda item: -item[0])
            ap, recall, precision = envelope_ap(
                [tp for _, tp in ranked], num_truth[cls], [conf for conf, _ in ranked]
            )
            aps.append(ap)
            if t_index == 0:
                curves[cls] = (recall, precision)
        per_class[cls] = tuple(aps)
    result = APResult(tuple(thresholds), per_class, num_truth, curves)
    logger.debug("evaluated %d images: mAP50=%.4f mAP50-95=%.4f", len(image_ids), result.map50, result.map50_95)
    return result


def brute_force_ap(
    detections: Mapping[str, Sequence[Detection]],
    ground_truth: Mapping[str, Sequence[GroundTruthBox]],
    class_id: int,
    threshold: float,
) -> float:
    """Second AP implementation: re-match from scratch at every distinct confidence cutoff,
    then integrate the best precision reachable at each new recall level."""
    num_truth = sum(1 for boxes in ground_truth.values() for g in boxes if g.class_id == class_id)
    if num_truth == 0:
        return 0.0
    confidences = sorted({d.confidence for ds in detections.values() for d in ds if d.class_id == class_id}, reverse=True)
    points = []
    for cutoff in confidences:
        tp = fp = 0
        for image_id, boxes in ground_truth.items():
            kept = [d for d in detections.get(image_id, []) if d.class_id == class_id and d.confidence >= cutoff]
            candidates = [g for g in boxes if g.class_id == class_id]
            taken: set[int] = set()
            for det in sorted(kept, key=_rank_key):
                scores = [(iou(det, g), -i) for i, g in enumerate(candidates) if i not in taken and iou(det, g) >= threshold]
                if scores:
                    taken.add(-max(scores)[1])
                    tp += 1
                else:
                    fp += 1
        points.append((tp / num_truth, tp / (tp + fp)))
    ap = 0.0
    previous = 0.0
    for recall, _ in points:
        if recall > previous:
            ap += (recall - previous) * max(p for r, p in points if r >= recall)
            previous = recall
    return ap
