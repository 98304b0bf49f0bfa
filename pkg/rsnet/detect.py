"""Anchor-free box decoding and the training loss.

Each cell of a pyramid level predicts raw box values whose exponentials are the
distances (left, top, right, bottom) from the cell center to the box sides, in units of
the level stride. Class logits go through a sigmoid to give confidences.
"""
from __future__ import annotations

import logging
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from rsnet import ops
from rsnet.boxes import Detection, GroundTruthBox
from rsnet.errors import DataError, ShapeError
from rsnet.metrics import nms
from rsnet.tensor import Tensor, as_tensor, clip, exp, maximum, minimum

logger = logging.getLogger("rsnet.detect")

LAMBDA_CLS = 1.0
LAMBDA_BOX = 2.5
# Largest box side (pixels) handled by each level but the last.
ASSIGN_RANGES = (64.0, 128.0)
_RAW_CLIP = 20.0

LevelOutput = tuple[Tensor, Tensor]


def _array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def _check_levels(levels: Sequence, strides: Sequence[int]) -> None:
    if len(levels) != len(strides):
        raise ShapeError(f"{len(levels)} output levels but {len(strides)} strides")


def decode_boxes(
    levels: Sequence[LevelOutput],
    strides: Sequence[int],
    image_size: tuple[int, int],
    conf_threshold: float = 0.25,
) -> list[list[Detection]]:
    """Decode raw (box, class) maps of a batch into per-image detections.

    Scores must exceed ``conf_threshold`` strictly; boxes are clamped to the image and
    those left with zero area are dropped. Results are sorted by confidence descending.
    """
    _check_levels(levels, strides)
    height, width = image_size
    batch = _array(levels[0][0]).shape[0] if levels else 0
    results: list[list[Detection]] = [[] for _ in range(batch)]
    for (box_raw, cls_raw), stride in zip(levels, strides):
        box = _array(box_raw)
        logits = _array(cls_raw)
        _, _, rows, cols = box.shape
        centers_y = (np.arange(rows) + 0.5) * stride
        centers_x = (np.arange(cols) + 0.5) * stride
        distances = np.exp(np.clip(box.astype(np.float64), -_RAW_CLIP, _RAW_CLIP)) * stride
        x1 = np.clip(centers_x[None, None, :] - distances[:, 0], 0, width)
        y1 = np.clip(centers_y[None, :, None] - distances[:, 1], 0, height)
        x2 = np.clip(centers_x[None, None, :] + distances[:, 2], 0, width)
        y2 = np.clip(centers_y[None, :, None] + distances[:, 3], 0, height)
        scores = expit(logits.astype(np.float64))
        for b, cls, y, x in zip(*np.nonzero(scores > conf_threshold)):
            w = x2[b, y, x] - x1[b, y, x]
            h = y2[b, y, x] - y1[b, y, x]
            if w <= 0 or h <= 0:
                continue
            results[b].append(Detection(
                class_id=int(cls),
                confidence=float(scores[b, cls, y, x]),
                cx=float((x1[b, y, x] + w / 2) / width),
                cy=float((y1[b, y, x] + h / 2) / height),
                w=float(w / width),
                h=float(h / height),
            ))
    for dets in results:
        dets.sort(key=lambda d: (-d.confidence, d.cx))
    return results


def level_for_box(box: GroundTruthBox, image_size: tuple[int, int], ranges: Sequence[float] = ASSIGN_RANGES) -> int:
    side = max(box.w * image_size[1], box.h * image_size[0])
    for level, limit in enumerate(ranges):
        if side <= limit:
            return level
    return len(ranges)


def target_distances(box: GroundTruthBox, cell: tuple[int, int], stride: int, image_size: tuple[int, int]) -> np.ndarray:
    """Signed (l, t, r, b) distances in stride units from the cell center to the box sides."""
    height, width = image_size
    y, x = cell
    cx, cy = (x + 0.5) * stride, (y + 0.5) * stride
    x1, y1, x2, y2 = box.corners()
    return np.array([cx - x1 * width, cy - y1 * height, x2 * width - cx, y2 * height - cy]) / stride


def encode_box(box: GroundTruthBox, cell: tuple[int, int], stride: int, image_size: tuple[int, int]) -> np.ndarray:
    """Raw box values that decode back to ``box`` at ``cell``; the cell center must lie inside the box."""
    distances = target_distances(box, cell, stride, image_size)
    if (distances <= 0).any():
        raise ValueError(f"cell {cell} center lies outside the box")
    return np.log(distances)


def center_cell(box: GroundTruthBox, stride: int, image_size: tuple[int, int], grid: tuple[int, int]) -> tuple[int, int]:
    height, width = image_size
    y = min(int(box.cy * height // stride), grid[0] - 1)
    x = min(int(box.cx * width // stride), grid[1] - 1)
    return y, x


class Assignment(NamedTuple):
    batch: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    classes: np.ndarray
    targets: np.ndarray  # (K, 4) signed distances


def assign_targets(
    ground_truth: Sequence[Sequence[GroundTruthBox]],
    strides: Sequence[int],
    grids: Sequence[tuple[int, int]],
    image_size: tuple[int, int],
    ranges: Sequence[float] = ASSIGN_RANGES,
) -> list[Assignment]:
    """Give each box the cell holding its center on the level chosen by its size.

    When two boxes claim the same cell the smaller one keeps it.
    """
    claims: list[dict[tuple[int, int, int], GroundTruthBox]] = [{} for _ in strides]
    for b, boxes in enumerate(ground_truth):
        for box in sorted(boxes, key=lambda g: -(g.w * g.h)):
            level = min(level_for_box(box, image_size, ranges), len(strides) - 1)
            y, x = center_cell(box, strides[level], image_size, grids[level])
            claims[level][(b, y, x)] = box
    assignments = []
    for level, stride in enumerate(strides):
        keys = sorted(claims[level])
        boxes = [claims[level][k] for k in keys]
        assignments.append(Assignment(
            batch=np.array([k[0] for k in keys], dtype=np.int64),
            rows=np.array([k[1] for k in keys], dtype=np.int64),
            cols=np.array([k[2] for k in keys], dtype=np.int64),
            classes=np.array([g.class_id for g in boxes], dtype=np.int64),
            targets=np.array([target_distances(g, k[1:], stride, image_size) for g, k in zip(boxes, keys)]).reshape(-1, 4),
        ))
    return assignments


def _distance_iou(pred: Tensor, target: np.ndarray) -> Tensor:
    """IoU of boxes given as (l, t, r, b) distances from a common point."""
    target = as_tensor(target, like=pred)
    left, top, right, bottom = (pred[:, i] for i in range(4))
    t_left, t_top, t_right, t_bottom = (target[:, i] for i in range(4))
    inter_w = maximum(minimum(right, t_right) + minimum(left, t_left), 0.0)
    inter_h = maximum(minimum(bottom, t_bottom) + minimum(top, t_top), 0.0)
    inter = inter_w * inter_h
    area_pred = (left + right) * (top + bottom)
    area_target = (t_left + t_right) * (t_top + t_bottom)
    return inter / (area_pred + area_target - inter)


class LossTerms(NamedTuple):
    total: Tensor
    cls: Tensor
    box: Tensor


def detection_loss(
    levels: Sequence[LevelOutput],
    ground_truth: Sequence[Sequence[GroundTruthBox]],
    strides: Sequence[int],
    image_size: tuple[int, int],
    ranges: Sequence[float] = ASSIGN_RANGES,
    weights: tuple[float, float] = (LAMBDA_CLS, LAMBDA_BOX),
) -> LossTerms:
    """Class BCE summed over every cell (normalized by the box count) plus mean (1 - IoU) on assigned cells."""
    _check_levels(levels, strides)
    if not ground_truth:
        raise ShapeError("detection_loss needs at least one image")
    batch = levels[0][0].shape[0]
    if len(ground_truth) != batch:
        raise ShapeError(f"{len(ground_truth)} ground-truth lists for a batch of {batch}")
    grids = [box.shape[2:] for box, _ in levels]
    assignments = assign_targets(ground_truth, strides, grids, image_size, ranges)
    num_boxes = sum(len(a.batch) for a in assignments)

    cls_loss = None
    ious = []
    for (box_raw, cls_raw), found in zip(levels, assignments):
        if len(found.classes) and found.classes.max() >= cls_raw.shape[1]:
            raise DataError(f"class id {found.classes.max()} outside the {cls_raw.shape[1]} predicted classes")
        targets = np.zeros(cls_raw.shape, dtype=cls_raw.dtype)
        targets[found.batch, found.classes, found.rows, found.cols] = 1.0
        level_bce = ops.bce_with_logits(cls_raw, targets).sum()
        cls_loss = level_bce if cls_loss is None else cls_loss + level_bce
        if len(found.batch):
            picked = box_raw[(found.batch, slice(None), found.rows, found.cols)]
            pred = exp(clip(picked, -_RAW_CLIP, _RAW_CLIP))
            ious.append(_distance_iou(pred, found.targets))

    cls_loss = cls_loss / max(num_boxes, 1)
    if ious:
        box_loss = None
        for iou_values in ious:
            term = (1.0 - iou_values).sum()
            box_loss = term if box_loss is None else box_loss + term
        box_loss = box_loss / num_boxes
    else:
        box_loss = as_tensor(0.0, like=cls_loss)
    total = weights[0] * cls_loss + weights[1] * box_loss
    return LossTerms(total, cls_loss, box_loss)


def predict(
    model,
    images,
    conf_threshold: float = 0.25,
    iou_threshold: float = 0.7,
) -> list[list[Detection]]:
    """Eval-mode forward, decode and per-image NMS for a (B, C, H, W) batch."""
    model.eval()
    levels = model(images)
    size = tuple(np.shape(images.data if isinstance(images, Tensor) else images)[2:])
    decoded = decode_boxes(levels, model.cfg.strides, size, conf_threshold)
    return [nms(dets, iou_threshold) for dets in decoded]
