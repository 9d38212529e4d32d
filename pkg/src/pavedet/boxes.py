"""Axis-aligned boxes in normalized image coordinates, IoU, and NMS."""

from dataclasses import dataclass


@dataclass(frozen=True)
class DetectionBox:
    """One scored detection. Coordinates are fractions of the image side."""

    class_id: int
    confidence: float
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    image_id: int = 0

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(
                f"inverted box extents ({self.x_min}, {self.y_min}, "
                f"{self.x_max}, {self.y_max})"
            )


@dataclass(frozen=True)
class GroundTruthBox:
    """One annotated object. Coordinates are fractions of the image side."""

    class_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    image_id: int = 0

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(
                f"inverted box extents ({self.x_min}, {self.y_min}, "
                f"{self.x_max}, {self.y_max})"
            )


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 for disjoint or degenerate."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = ((a.x_max - a.x_min) * (a.y_max - a.y_min)
             + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter)
    if union <= 0.0:
        return 0.0
    return inter / union


def nms(boxes, iou_threshold: float = 0.45) -> list:
    """Class-wise greedy suppression.

    Boxes are visited by descending confidence (ties by input index); a box
    is kept iff its IoU with every already-kept box of the same class is
    below the threshold. Output preserves the visiting order.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].confidence, i))
    kept = []
    for i in order:
        b = boxes[i]
        if all(iou(b, k) < iou_threshold
               for k in kept if k.class_id == b.class_id):
            kept.append(b)
    return kept
