"""Detection AP/AR over IoU thresholds and example-based multi-label metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import BoundingBox, Detection, _greedy_match, boxes_to_array, iou_matrix, score_order

IOU_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_LEVELS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class DetectionEvalResult:
    ap_per_iou: dict[float, float]
    ap_range: float
    ar_per_iou: dict[float, float]
    ar_range: float

    def ap_at(self, threshold: float) -> float:
        return self.ap_per_iou[_nearest(self.ap_per_iou, threshold)]

    def ar_at(self, threshold: float) -> float:
        return self.ar_per_iou[_nearest(self.ar_per_iou, threshold)]

    def to_dict(self) -> dict:
        return {
            "ap_per_iou": {f"{k:.2f}": v for k, v in self.ap_per_iou.items()},
            "ap_range": self.ap_range,
            "ar_per_iou": {f"{k:.2f}": v for k, v in self.ar_per_iou.items()},
            "ar_range": self.ar_range,
        }


@dataclass(frozen=True)
class MultiLabelMetrics:
    accuracy: float
    precision: float
    recall: float

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall}


def _nearest(table: Mapping[float, float], key: float) -> float:
    return min(table, key=lambda k: abs(k - key))


def _check_keys(preds: Mapping, truths: Mapping) -> None:
    extra = set(preds) - set(truths)
    if extra:
        raise KeyError(f"predictions for images without ground truth entry: {sorted(map(str, extra))}")


def _match_flags(preds: Mapping, truths: Mapping, iou_threshold: float):
    """Per-prediction (score, is_tp) in image insertion order, plus total truth count."""
    scores, flags = [], []
    for key, gt in truths.items():
        dets = list(preds.get(key, ()))
        img_flags = np.zeros(len(dets), dtype=bool)
        if dets:
            ious = iou_matrix(boxes_to_array([d.box for d in dets]), boxes_to_array(gt))
            m = _greedy_match(score_order([d.score for d in dets]), ious, iou_threshold, len(gt))
            for p, _ in m.tp:
                img_flags[p] = True
        scores.extend(d.score for d in dets)
        flags.extend(img_flags.tolist())
    n_truth = sum(len(gt) for gt in truths.values())
    return np.asarray(scores, dtype=np.float64), np.asarray(flags, dtype=bool), n_truth


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """101-point AP: at each recall level take the best precision at any recall >= level."""
    values = []
    for r in RECALL_LEVELS:
        mask = recall >= r
        values.append(float(precision[mask].max()) if mask.any() else 0.0)
    return math.fsum(values) / len(values)


def average_precision(
    preds: Mapping[object, Sequence[Detection]],
    truths: Mapping[object, Sequence[BoundingBox]],
    iou_threshold: float,
) -> float:
    """AP at one IoU threshold from predictions pooled over all images.

    Parameters
    ----------
    preds, truths : mapping
        Image key -> detections / ground-truth boxes. Every key of ``preds``
        must appear in ``truths``; images missing from ``preds`` have no
        detections.
    iou_threshold : float
        Minimum IoU for a true positive.
    """
    _check_keys(preds, truths)
    scores, flags, n_truth = _match_flags(preds, truths, iou_threshold)
    if n_truth == 0:
        raise ValueError("AP undefined: no ground-truth boxes")
    if len(scores) == 0:
        return 0.0
    order = score_order(scores)
    tp = np.cumsum(flags[order])
    fp = np.cumsum(~flags[order])
    recall = tp / n_truth
    precision = tp / (tp + fp)
    return interpolated_ap(recall, precision)


def average_recall(
    preds: Mapping[object, Sequence[Detection]],
    truths: Mapping[object, Sequence[BoundingBox]],
    iou_threshold: float,
    max_detections: int = 100,
) -> float:
    """Mean over images (with at least one truth) of recall using the top-scored detections."""
    _check_keys(preds, truths)
    recalls = []
    for key, gt in truths.items():
        if not gt:
            continue
        dets = list(preds.get(key, ()))
        order = score_order([d.score for d in dets])[:max_detections]
        top = [dets[i] for i in order]
        if top:
            ious = iou_matrix(boxes_to_array([d.box for d in top]), boxes_to_array(gt))
            n_tp = len(_greedy_match(np.arange(len(top)), ious, iou_threshold, len(gt)).tp)
        else:
            n_tp = 0
        recalls.append(n_tp / len(gt))
    if not recalls:
        raise ValueError("AR undefined: no ground-truth boxes")
    return math.fsum(recalls) / len(recalls)


def evaluate_detections(
    preds: Mapping[object, Sequence[Detection]],
    truths: Mapping[object, Sequence[BoundingBox]],
    max_detections: int = 100,
) -> DetectionEvalResult:
    """AP and AR at IoU 0.50:0.05:0.95 with their means over thresholds."""
    ap = {t: average_precision(preds, truths, t) for t in IOU_THRESHOLDS}
    ar = {t: average_recall(preds, truths, t, max_detections) for t in IOU_THRESHOLDS}
    return DetectionEvalResult(
        ap_per_iou=ap,
        ap_range=math.fsum(ap.values()) / len(ap),
        ar_per_iou=ar,
        ar_range=math.fsum(ar.values()) / len(ar),
    )


def multilabel_metrics(
    pred_sets: Sequence[Iterable[int]],
    true_sets: Sequence[Iterable[int]],
) -> MultiLabelMetrics:
    """Example-based accuracy (Jaccard), precision and recall averaged over samples.

    Empty predictions score precision 0; empty truths score recall 0. A sample
    whose prediction and truth are both empty counts as accuracy 1.
    """
    if len(pred_sets) != len(true_sets):
        raise ValueError(f"length mismatch: {len(pred_sets)} predictions vs {len(true_sets)} truths")
    if len(pred_sets) == 0:
        raise ValueError("no samples")
    acc, prec, rec = [], [], []
    for p, t in zip(pred_sets, true_sets):
        p, t = {int(x) for x in p}, {int(x) for x in t}
        inter, union = len(p & t), len(p | t)
        acc.append(inter / union if union else 1.0)
        prec.append(inter / len(p) if p else 0.0)
        rec.append(inter / len(t) if t else 0.0)
    n = len(acc)
    return MultiLabelMetrics(math.fsum(acc) / n, math.fsum(prec) / n, math.fsum(rec) / n)
