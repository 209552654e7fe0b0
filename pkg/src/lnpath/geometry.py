"""Box geometry: IoU, greedy NMS and one-to-one prediction/truth matching."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel rectangle ``(x_min, y_min, x_max, y_max)``."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def scaled(self, factor: float) -> "BoundingBox":
        return BoundingBox(*(c * factor for c in self.as_tuple()))

    @classmethod
    def from_array(cls, arr) -> "BoundingBox":
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class Matching:
    """Result of :func:`match_detections`; indices refer to the input lists."""

    tp: list[tuple[int, int]] = field(default_factory=list)  # (pred index, truth index)
    fp: list[int] = field(default_factory=list)
    fn: list[int] = field(default_factory=list)


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    if a.area <= 0 or b.area <= 0:
        raise ValueError("zero-area box")
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` xyxy arrays -> ``(N, M)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.minimum(out, 1.0)


def score_order(scores) -> np.ndarray:
    """Indices by descending score; ties keep insertion order."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def nms_indices(boxes: np.ndarray, scores, iou_threshold: float) -> np.ndarray:
    """Array form of :func:`nms`, returning kept indices in descending-score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = score_order(scores)
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        rest = rest[~suppressed[rest]]
        if len(rest):
            ov = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
            suppressed[rest[ov > iou_threshold]] = True
    return np.array(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression.

    A detection is dropped when its IoU with an already kept, higher-scored
    detection exceeds ``iou_threshold``. The result is sorted by descending
    score.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in [0, 1]")
    if not dets:
        return []
    keep = nms_indices(boxes_to_array([d.box for d in dets]), [d.score for d in dets], iou_threshold)
    return [dets[i] for i in keep]


def match_detections(
    preds: Sequence[Detection],
    truths: Sequence[BoundingBox],
    iou_threshold: float,
) -> Matching:
    """Greedy one-to-one matching in descending score order.

    Each prediction takes the still-unmatched truth with the highest IoU
    (at least ``iou_threshold``); equal IoUs go to the lower truth index.
    """
    order = score_order([d.score for d in preds])
    ious = iou_matrix(boxes_to_array([d.box for d in preds]), boxes_to_array(truths))
    return _greedy_match(order, ious, iou_threshold, len(truths))


def _greedy_match(order, ious: np.ndarray, iou_threshold: float, n_truths: int) -> Matching:
    taken = np.zeros(n_truths, dtype=bool)
    result = Matching()
    for p in order:
        best, best_iou = -1, -1.0
        for t in range(n_truths):
            if taken[t]:
                continue
            v = ious[p, t]
            if v >= iou_threshold and v > best_iou:
                best, best_iou = t, v
        if best >= 0:
            taken[best] = True
            result.tp.append((int(p), best))
        else:
            result.fp.append(int(p))
    result.fn = [t for t in range(n_truths) if not taken[t]]
    return result
