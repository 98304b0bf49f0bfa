"""Feature-norm heat maps of named model activations."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from rsnet.boxes import GroundTruthBox
from rsnet.errors import ConfigError
from rsnet.layers import capture_activations
from rsnet.model import RSNet
from rsnet.pgm import resize_bilinear, write_pgm
from rsnet.tensor import Tensor

logger = logging.getLogger("rsnet.heatmap")


def as_batch(image: np.ndarray, channels: int, dtype=np.float32) -> np.ndarray:
    """Scale 8-bit pixels to [0, 1] and shape them as a (1, C, H, W) batch."""
    pixels = np.asarray(image)
    if pixels.ndim == 2:
        pixels = np.repeat(pixels[None], channels, axis=0)
    if pixels.ndim != 3 or pixels.shape[0] != channels:
        raise ConfigError(f"image of shape {np.asarray(image).shape} does not fit a {channels}-channel model")
    return (pixels.astype(dtype) / 255.0)[None]


def feature_heatmap(model: RSNet, image: np.ndarray, layer: str) -> np.ndarray:
    """Per-pixel channel L2 norm of ``layer``'s activation, min-max scaled to 0..255 and
    bilinearly upsampled to the image size. A flat activation maps to all zeros."""
    if layer not in model.layer_names():
        raise ConfigError(f"unknown layer '{layer}'")
    batch = image if isinstance(image, Tensor) else as_batch(image, model.cfg.in_channels, model.dtype)
    data = batch.data if isinstance(batch, Tensor) else batch
    was_training = model.training
    model.eval()
    try:
        with capture_activations([layer]) as capture:
            model(batch)
    finally:
        model.train(was_training)
    activation = capture.activations[layer][0].astype(np.float64)
    norms = np.sqrt((activation ** 2).sum(axis=0))
    low, high = norms.min(), norms.max()
    scaled = np.zeros_like(norms) if high - low <= 0 else (norms - low) / (high - low) * 255.0
    upsampled = resize_bilinear(scaled, data.shape[2:])
    return np.clip(np.rint(upsampled), 0, 255).astype(np.uint8)


def export_heatmap(model: RSNet, image: np.ndarray, layer: str, path: str | Path) -> np.ndarray:
    heat = feature_heatmap(model, image, layer)
    write_pgm(path, heat)
    logger.info("wrote heat map of %s to %s", layer, path)
    return heat


def peak_in_box(heat: np.ndarray, boxes: list[GroundTruthBox]) -> bool:
    """Whether the heat map's brightest pixel lies inside any of ``boxes``."""
    height, width = heat.shape
    y, x = np.unravel_index(int(np.argmax(heat)), heat.shape)
    px, py = (x + 0.5) / width, (y + 0.5) / height
    for box in boxes:
        x1, y1, x2, y2 = box.corners()
        if x1 <= px <= x2 and y1 <= py <= y2:
            return True
    return False
