"""8-bit binary PGM (P5) images."""
from __future__ import annotations

from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image, ImageDraw

from rsnet.boxes import Detection
from rsnet.errors import DataError


def read_pgm(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        with path.open("rb") as handle:
            magic = handle.read(2)
            if magic != b"P5":
                raise DataError(f"{path}: not a binary PGM (P5) image")
            handle.seek(0)
            with Image.open(handle) as image:
                image.load()
                if image.mode != "L":
                    raise DataError(f"{path}: expected an 8-bit grayscale PGM, got mode {image.mode}")
                return np.asarray(image, dtype=np.uint8).copy()
    except OSError as err:
        raise DataError(f"cannot read image {path}: {err.strerror or err}") from err


def write_pgm(path: str | Path, pixels: np.ndarray) -> Path:
    path = Path(path)
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError(f"PGM pixels must be a 2-D uint8 array, got {pixels.dtype} {pixels.shape}")
    try:
        Image.fromarray(pixels).save(path, format="PPM")
    except OSError as err:
        raise DataError(f"cannot write image {path}: {err.strerror or err}") from err
    return path


def resize_bilinear(values: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a 2-D float map to (height, width)."""
    height, width = size
    image = Image.fromarray(np.asarray(values, dtype=np.float32))
    return np.asarray(image.resize((width, height), Image.Resampling.BILINEAR), dtype=np.float32)


def annotate(pixels: np.ndarray, detections: Iterable[Detection], value: int = 255) -> np.ndarray:
    """Copy of ``pixels`` with a one-pixel rectangle drawn around every detection."""
    image = Image.fromarray(np.asarray(pixels, dtype=np.uint8))
    draw = ImageDraw.Draw(image)
    height, width = pixels.shape
    for det in detections:
        x1, y1, x2, y2 = det.corners()
        draw.rectangle(
            [x1 * width, y1 * height, max(x2 * width - 1, x1 * width), max(y2 * height - 1, y1 * height)],
            outline=value,
        )
    return np.asarray(image, dtype=np.uint8).copy()
