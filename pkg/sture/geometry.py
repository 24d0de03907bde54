"""Box arithmetic, overlap statistics and the linear motion model."""
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Iterable, Sequence, Tuple

import numpy as np

from sture.errors import ContractViolation, ValidationError

Point = Tuple[float, float]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in continuous pixel coordinates."""

    left: float
    top: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValidationError(
                f"Box ({self.left}, {self.top}, {self.width}, {self.height}) needs positive width and height"
            )

    @property
    def right(self) -> float:
        return self.left + self.width

    @property
    def bottom(self) -> float:
        return self.top + self.height

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Point:
        return (self.left + self.width / 2.0, self.top + self.height / 2.0)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def centered_at(self, center: Point) -> "BoundingBox":
        """Same size, moved so its center is ``center``."""
        return BoundingBox(center[0] - self.width / 2.0, center[1] - self.height / 2.0, self.width, self.height)

    def to_tlbr(self) -> Tuple[float, float, float, float]:
        return (self.left, self.top, self.right, self.bottom)

    def clamped(self, img_width: float, img_height: float):
        """Box clipped to the image, or None when nothing is left inside."""
        left = min(max(self.left, 0.0), img_width)
        top = min(max(self.top, 0.0), img_height)
        right = min(max(self.right, 0.0), img_width)
        bottom = min(max(self.bottom, 0.0), img_height)
        if right - left <= 0 or bottom - top <= 0:
            return None
        return BoundingBox(left, top, right - left, bottom - top)

    def outside(self, img_width: float, img_height: float) -> bool:
        return self.right <= 0 or self.bottom <= 0 or self.left >= img_width or self.top >= img_height


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes."""
    iw = min(a.right, b.right) - max(a.left, b.left)
    ih = min(a.bottom, b.bottom) - max(a.top, b.top)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a: Sequence[BoundingBox], boxes_b: Sequence[BoundingBox]) -> np.ndarray:
    """Pairwise IoU, shape (len(boxes_a), len(boxes_b))."""
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)))
    a = np.array([box.to_tlbr() for box in boxes_a], dtype=np.float64)
    b = np.array([box.to_tlbr() for box in boxes_b], dtype=np.float64)
    a = a[:, None, :]
    b = b[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter / (area_a + area_b - inter)


def overlap_indicator(track_box: BoundingBox, frame_detections: Sequence[BoundingBox], tau_o: float) -> int:
    """1 when the best IoU against this frame's detections reaches ``tau_o``."""
    if not frame_detections:
        return 0
    best = max(iou(track_box, det) for det in frame_detections)
    return 1 if best >= tau_o else 0


def mean_overlap(indicator_history: Sequence[int]) -> float:
    """Average of the stored overlap indicators."""
    if len(indicator_history) == 0:
        raise ContractViolation("mean_overlap needs at least one indicator")
    return float(sum(indicator_history)) / len(indicator_history)


def estimate_velocity(history: Sequence[Point], L: int) -> Point:
    """Per-frame velocity from the newest center and the one ``L`` frames back.

    ``history`` is ordered oldest to newest and its last entry is p_{t-1}.
    The entry k positions from the end is treated as p_{t-k}; when fewer
    than ``L`` centers exist the oldest one is used with its true age.
    """
    if len(history) < 2:
        return (0.0, 0.0)
    age = min(L, len(history))
    newest = history[-1]
    oldest = history[-age]
    return ((newest[0] - oldest[0]) / age, (newest[1] - oldest[1]) / age)


def predict_position(center: Point, velocity: Point) -> Point:
    return (center[0] + velocity[0], center[1] + velocity[1])


@dataclass
class MotionState:
    """Center history and velocity of one track."""

    window: int
    history: Deque[Point] = field(default_factory=deque)
    velocity: Point = (0.0, 0.0)

    def __post_init__(self):
        self.history = deque(self.history, maxlen=self.window)

    @property
    def center(self) -> Point:
        if not self.history:
            raise ContractViolation("MotionState has no observed center")
        return self.history[-1]

    def observe(self, center: Point) -> None:
        """Record a measured center and refresh the velocity."""
        self.history.append(center)
        self.velocity = estimate_velocity(list(self.history), self.window)

    def observe_all(self, centers: Iterable[Point]) -> None:
        for center in centers:
            self.observe(center)

    def predict(self) -> Point:
        return predict_position(self.center, self.velocity)

    def coast(self) -> Point:
        """Advance one frame on the held velocity; the velocity is not refreshed."""
        center = self.predict()
        self.history.append(center)
        return center

    def correct(self, center: Point) -> None:
        """Replace the newest (coasted) center with a measurement."""
        if self.history:
            self.history.pop()
        self.observe(center)


