"""Synthetic SAR-like scenes and the on-disk dataset layout.

A dataset directory holds ``images/NNNNNN.pgm`` (8-bit P5), ``labels/NNNNNN.txt`` with
one ``class cx cy w h`` line per ship (normalized), and ``manifest.txt`` listing
``image label`` path pairs relative to the directory.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from rsnet.boxes import SHIP, GroundTruthBox
from rsnet.errors import ConfigError, DataError
from rsnet.pgm import read_pgm, write_pgm
from rsnet.rng import Rng
from rsnet.textconf import TextConfig, dump

logger = logging.getLogger("rsnet.data")

MANIFEST = "manifest.txt"
SCENE_SPEC = "scene.cfg"
_PLACEMENT_ATTEMPTS = 50


@dataclass(frozen=True)
class SyntheticSceneSpec:
    image_size: int = 128
    ship_count: tuple[int, int] = (1, 3)
    ship_length: tuple[float, float] = (12.0, 40.0)
    ship_width: tuple[float, float] = (4.0, 10.0)
    intensity: tuple[float, float] = (180.0, 250.0)
    background_mean: float = 40.0
    looks: float = 4.0
    clutter_prob: float = 0.3
    edge_sigma: float = 0.8
    seed: int = 0

    def __post_init__(self):
        def fail(message):
            raise ConfigError(f"scene spec: {message}")

        if self.image_size < 16:
            fail(f"image_size must be >= 16, got {self.image_size}")
        for name in ("ship_count", "ship_length", "ship_width", "intensity"):
            low, high = getattr(self, name)
            if low > high or low < 0:
                fail(f"{name} range ({low}, {high}) is not an ordered non-negative pair")
        if self.ship_width[0] <= 0 or self.ship_length[0] <= 0:
            fail("ship sizes must be positive")
        if math.hypot(self.ship_length[1], self.ship_width[1]) > self.image_size - 2:
            fail(f"ships up to {self.ship_length[1]}x{self.ship_width[1]} do not fit a {self.image_size} px image")
        if self.intensity[1] > 255 or not 0 <= self.background_mean <= 255:
            fail("intensities must lie in [0, 255]")
        if self.looks <= 0:
            fail(f"looks must be positive, got {self.looks}")
        if not 0 <= self.clutter_prob <= 1:
            fail(f"clutter_prob must be in [0, 1], got {self.clutter_prob}")

    @classmethod
    def from_text(cls, conf: TextConfig) -> "SyntheticSceneSpec":
        base = cls()
        values = dict(
            image_size=conf.get_int("image_size", base.image_size),
            ship_count=conf.get_int_list("ship_count", base.ship_count),
            ship_length=conf.get_float_list("ship_length", base.ship_length),
            ship_width=conf.get_float_list("ship_width", base.ship_width),
            intensity=conf.get_float_list("intensity", base.intensity),
            background_mean=conf.get_float("background_mean", base.background_mean),
            looks=conf.get_float("looks", base.looks),
            clutter_prob=conf.get_float("clutter_prob", base.clutter_prob),
            edge_sigma=conf.get_float("edge_sigma", base.edge_sigma),
            seed=conf.get_int("seed", base.seed),
        )
        conf.finish()
        for key in ("ship_count", "ship_length", "ship_width", "intensity"):
            if len(values[key]) != 2:
                raise ConfigError(f"{conf.source}: '{key}' needs two values (low, high)")
        return cls(**values)

    @classmethod
    def read(cls, path: str | Path) -> "SyntheticSceneSpec":
        return cls.from_text(TextConfig.read(path))

    def to_text(self) -> str:
        return dump((f.name, getattr(self, f.name)) for f in fields(self))

    def with_seed(self, seed: int) -> "SyntheticSceneSpec":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values["seed"] = seed
        return SyntheticSceneSpec(**values)


def _rectangle_mask(size: int, cx: float, cy: float, length: float, width: float, angle: float) -> np.ndarray:
    coords = np.arange(size) + 0.5
    px, py = np.meshgrid(coords, coords)
    cos, sin = math.cos(angle), math.sin(angle)
    along = (px - cx) * cos + (py - cy) * sin
    across = -(px - cx) * sin + (py - cy) * cos
    return ((np.abs(along) <= length / 2) & (np.abs(across) <= width / 2)).astype(np.float64)


def _overlaps(box: tuple[float, float, float, float], placed: list[tuple[float, float, float, float]]) -> bool:
    x1, y1, x2, y2 = box
    return any(x1 < bx2 and bx1 < x2 and y1 < by2 and by1 < y2 for bx1, by1, bx2, by2 in placed)


def render_scene(spec: SyntheticSceneSpec, rng: Rng) -> tuple[np.ndarray, list[GroundTruthBox]]:
    """Noise-free scene (float gray levels) and its ground truth.

    Ships are oriented rectangles with Gaussian-softened edges; their boxes are the
    axis-aligned hulls. Clutter patches are dimmer blobs with no label.
    """
    size = spec.image_size
    image = np.full((size, size), spec.background_mean, dtype=np.float64)

    if rng.random() < spec.clutter_prob:
        radius = rng.uniform(size / 16, size / 6)
        cx, cy = rng.uniform(0, size), rng.uniform(0, size)
        coords = np.arange(size) + 0.5
        px, py = np.meshgrid(coords, coords)
        blob = np.exp(-((px - cx) ** 2 + (py - cy) ** 2) / (2 * radius ** 2))
        image += blob * spec.background_mean * rng.uniform(0.5, 1.5)

    count = int(rng.integers(spec.ship_count[0], spec.ship_count[1] + 1))
    placed: list[tuple[float, float, float, float]] = []
    boxes: list[GroundTruthBox] = []
    for index in range(count):
        length = rng.uniform(*spec.ship_length)
        width = min(rng.uniform(*spec.ship_width), length)
        angle = rng.uniform(0, math.pi)
        half_x = (length * abs(math.cos(angle)) + width * abs(math.sin(angle))) / 2
        half_y = (length * abs(math.sin(angle)) + width * abs(math.cos(angle))) / 2
        for _ in range(_PLACEMENT_ATTEMPTS):
            cx = rng.uniform(half_x + 1, size - half_x - 1)
            cy = rng.uniform(half_y + 1, size - half_y - 1)
            hull = (cx - half_x, cy - half_y, cx + half_x, cy + half_y)
            if not _overlaps(hull, placed):
                break
        else:
            logger.warning("could not place ship %d of %d without overlap; skipped", index + 1, count)
            continue
        placed.append(hull)
        mask = gaussian_filter(_rectangle_mask(size, cx, cy, length, width, angle), sigma=spec.edge_sigma)
        image = image * (1 - mask) + rng.uniform(*spec.intensity) * mask
        boxes.append(GroundTruthBox(SHIP, cx / size, cy / size, 2 * half_x / size, 2 * half_y / size))
    return image, boxes


def apply_speckle(clean: np.ndarray, looks: float, rng: Rng) -> np.ndarray:
    """Multiplicative gamma(L, 1/L) speckle (unit mean), clamped and rounded to 8 bits."""
    noise = rng.gamma(looks, 1.0 / looks, clean.shape)
    return np.clip(np.rint(clean * noise), 0, 255).astype(np.uint8)


def synthesize(spec: SyntheticSceneSpec, index: int) -> tuple[np.ndarray, list[GroundTruthBox]]:
    rng = Rng(spec.seed, f"scene.{index}")
    clean, boxes = render_scene(spec, rng.split("render"))
    return apply_speckle(clean, spec.looks, rng.split("speckle")), boxes


def format_label(box: GroundTruthBox) -> str:
    return f"{box.class_id} {box.cx:.6f} {box.cy:.6f} {box.w:.6f} {box.h:.6f}"


def generate_dataset(spec: SyntheticSceneSpec, n_images: int, out_dir: str | Path, force: bool = False) -> Path:
    """Write ``n_images`` scenes; the bytes depend only on ``spec`` (seed included)."""
    if n_images < 1:
        raise ConfigError(f"number of images must be >= 1, got {n_images}")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"output directory {out} is not empty (use --force to overwrite)")
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
        lines = []
        for index in range(n_images):
            pixels, boxes = synthesize(spec, index)
            image_rel, label_rel = f"images/{index:06d}.pgm", f"labels/{index:06d}.txt"
            write_pgm(out / image_rel, pixels)
            (out / label_rel).write_text("".join(format_label(b) + "\n" for b in boxes), encoding="utf-8")
            lines.append(f"{image_rel} {label_rel}\n")
        (out / MANIFEST).write_text("".join(lines), encoding="utf-8")
        (out / SCENE_SPEC).write_text(spec.to_text(), encoding="utf-8")
    except OSError as err:
        raise DataError(f"cannot write dataset to {out}: {err.strerror or err}") from err
    logger.info("wrote %d synthetic scenes to %s", n_images, out)
    return out


def read_labels(path: str | Path) -> list[GroundTruthBox]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise DataError(f"cannot read labels {path}: {err.strerror or err}") from err
    boxes = []
    for number, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise DataError(f"{path}:{number}: expected 'class cx cy w h', got {line!r}")
        try:
            class_id = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError:
            raise DataError(f"{path}:{number}: malformed label {line!r}") from None
        try:
            boxes.append(GroundTruthBox(class_id, cx, cy, w, h))
        except DataError as err:
            raise DataError(f"{path}:{number}: {err}") from None
    return boxes


@dataclass(frozen=True)
class Sample:
    image_id: str
    image_path: Path
    label_path: Path


class Dataset:
    def __init__(self, root: Path, samples: list[Sample]):
        self.root = root
        self.samples = samples

    @classmethod
    def open(cls, root: str | Path) -> "Dataset":
        root = Path(root)
        manifest = root / MANIFEST
        try:
            lines = manifest.read_text(encoding="utf-8").splitlines()
        except OSError as err:
            raise DataError(f"cannot read dataset manifest {manifest}: {err.strerror or err}") from err
        samples = []
        seen: set[str] = set()
        for number, line in enumerate(lines, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataError(f"{manifest}:{number}: expected 'image label', got {line!r}")
            image_id = Path(parts[0]).stem
            if image_id in seen:
                raise DataError(f"{manifest}:{number}: duplicate image id '{image_id}'")
            seen.add(image_id)
            samples.append(Sample(image_id, root / parts[0], root / parts[1]))
        if not samples:
            raise DataError(f"dataset {root} is empty")
        return cls(root, samples)

    def __len__(self) -> int:
        return len(self.samples)

    def load(self, index: int) -> tuple[np.ndarray, list[GroundTruthBox]]:
        sample = self.samples[index]
        return read_pgm(sample.image_path), read_labels(sample.label_path)

    @property
    def image_size(self) -> tuple[int, int]:
        return read_pgm(self.samples[0].image_path).shape
