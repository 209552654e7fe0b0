"""CircleMix sector mixing and inverse-frequency oversampling weights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .classes import N_GLOM_CLASSES


@dataclass
class LabeledCrop:
    image: np.ndarray
    labels: np.ndarray
    crop_id: str = ""
    patient_id: str = ""

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] != img.shape[1]:
            raise ValueError(f"crop must be a square HxWx3 image, got {img.shape}")
        lab = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if lab.shape != (N_GLOM_CLASSES,):
            raise ValueError(f"labels must have {N_GLOM_CLASSES} entries")
        if (lab < 0).any() or (lab > 1).any() or not (lab > 0).any():
            raise ValueError("label entries must lie in [0, 1] with at least one positive")
        self.image = img
        self.labels = lab

    @property
    def side(self) -> int:
        return self.image.shape[0]


@dataclass(frozen=True)
class MixSpec:
    start_angle: float
    end_angle: float
    lam: float

    def to_dict(self) -> dict:
        return {"start_angle": self.start_angle, "end_angle": self.end_angle, "lambda": self.lam}


def sector_mask(side: int, start_angle: float, end_angle: float) -> np.ndarray:
    """Pixels whose center angle about the crop center lies in ``[start, end)``.

    Angles are in degrees measured with ``atan2(dy, dx)`` in image coordinates
    (x right, y down) and wrap at 360. ``end - start >= 360`` selects the full
    disc; start and end equal modulo 360 is rejected. The center pixel of an
    odd-sized crop always belongs to the sector.
    """
    if end_angle - start_angle >= 360.0:
        return np.ones((side, side), dtype=bool)
    start, end = start_angle % 360.0, end_angle % 360.0
    if start == end:
        raise ValueError("start and end angle coincide modulo 360")
    c = side / 2.0
    yy, xx = np.mgrid[0:side, 0:side]
    dy, dx = yy + 0.5 - c, xx + 0.5 - c
    theta = np.degrees(np.arctan2(dy, dx)) % 360.0
    if start < end:
        mask = (theta >= start) & (theta < end)
    else:
        mask = (theta >= start) | (theta < end)
    mask |= (dy == 0) & (dx == 0)
    return mask


def circlemix(a: LabeledCrop, b: LabeledCrop, start_angle: float, end_angle: float) -> tuple[LabeledCrop, MixSpec]:
    """Copy the angular sector ``[start_angle, end_angle)`` from ``a`` and the rest from ``b``.

    The label vector is ``lam * a.labels + (1 - lam) * b.labels`` where ``lam``
    is the exact fraction of pixels taken from ``a``.
    """
    if a.image.shape != b.image.shape:
        raise ValueError(f"crop shapes differ: {a.image.shape} vs {b.image.shape}")
    mask = sector_mask(a.side, start_angle, end_angle)
    lam = int(mask.sum()) / mask.size
    image = np.where(mask[..., None], a.image, b.image)
    labels = lam * a.labels + (1.0 - lam) * b.labels
    mixed = LabeledCrop(image, labels, crop_id=f"mix({a.crop_id},{b.crop_id})", patient_id=a.patient_id)
    return mixed, MixSpec(float(start_angle), float(end_angle), lam)


def sample_mix_pairs(
    dataset: Sequence[LabeledCrop], count: int, seed: int, return_specs: bool = False
):
    """``count`` CircleMix samples from uniformly drawn pairs and arcs.

    Both arc endpoints are uniform on [0, 360); pairs are drawn with
    replacement. When ``return_specs`` is set, ``(crops, [(i, j, MixSpec)])``
    is returned so every mix can be replayed.
    """
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    out, specs = [], []
    for _ in range(count):
        i, j = (int(v) for v in rng.integers(0, len(dataset), size=2))
        start = float(rng.uniform(0.0, 360.0))
        end = float(rng.uniform(0.0, 360.0))
        while end == start:
            end = float(rng.uniform(0.0, 360.0))
        mixed, spec = circlemix(dataset[i], dataset[j], start, end)
        out.append(mixed)
        specs.append((i, j, spec))
    return (out, specs) if return_specs else out


def oversample_weights(label_sets) -> np.ndarray:
    """Per-sample sampling weights that balance label frequencies.

    Each sample gets the largest inverse frequency among its positive
    classes; weights are normalized to sum to 1.
    """
    Y = np.asarray(label_sets, dtype=np.float64).reshape(-1, N_GLOM_CLASSES) > 0
    if len(Y) == 0:
        raise ValueError("no samples")
    if not Y.any(axis=1).all():
        raise ValueError("every sample needs at least one positive label")
    freq = Y.sum(axis=0)
    inv = np.where(freq > 0, 1.0 / np.maximum(freq, 1), 0.0)
    w = (Y * inv[None, :]).max(axis=1)
    return w / w.sum()
