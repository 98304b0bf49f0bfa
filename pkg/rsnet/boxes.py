from __future__ import annotations

from dataclasses import dataclass

from rsnet.errors import DataError

SHIP = 0


@dataclass(frozen=True)
class GroundTruthBox:
    """Axis-aligned box in normalized center/size coordinates."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DataError(f"degenerate box: w={self.w}, h={self.h}")
        if self.class_id < 0:
            raise DataError(f"class id must be non-negative, got {self.class_id}")
        x1, y1, x2, y2 = self.corners()
        tol = 1e-6
        if x1 < -tol or y1 < -tol or x2 > 1 + tol or y2 > 1 + tol:
            raise DataError(f"box ({self.cx}, {self.cy}, {self.w}, {self.h}) leaves the unit square")

    def corners(self) -> tuple[float, float, float, float]:
        return corners(self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class Detection:
    class_id: int
    confidence: float
    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return corners(self.cx, self.cy, self.w, self.h)


def corners(cx: float, cy: float, w: float, h: float) -> tuple[float, float, float, float]:
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou(a, b) -> float:
    """Intersection over union of two boxes given as objects with cx, cy, w, h."""
    ax1, ay1, ax2, ay2 = a.corners() if hasattr(a, "corners") else corners(*a)
    bx1, by1, bx2, by2 = b.corners() if hasattr(b, "corners") else corners(*b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)
