"""Two-stage region-proposal glomerulus detector.

Box arithmetic (anchors, box coding, target assignment, sampling) is plain
NumPy; the network is a small conv backbone, a proposal head over anchors
and a region head over 7x7 max-pooled region features.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn
from torchvision.ops import nms as tv_nms, roi_pool

from .augment import LabeledCrop
from .classes import to_vector
from .geometry import BoundingBox, Detection, boxes_to_array, iou_matrix, match_detections
from .nn_common import TrainingError, UntrainedModelError, check_finite, image_tensor, init_module

BBOX_CLIP = math.log(1000.0 / 16.0)
RPN_WEIGHTS = (1.0, 1.0, 1.0, 1.0)
ROI_WEIGHTS = (10.0, 10.0, 5.0, 5.0)


@dataclass(frozen=True)
class AnchorSpec:
    stride: int = 16
    scales: tuple[float, ...] = (32.0, 64.0, 128.0)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        if self.stride <= 0 or not self.scales or not self.aspect_ratios:
            raise ValueError("anchor stride, scales and ratios must be positive and non-empty")
        if min(self.scales) <= 0 or min(self.aspect_ratios) <= 0:
            raise ValueError("anchor scales and ratios must be positive")

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)


@dataclass
class DetectorConfig:
    epochs: int = 50
    batch_size: int = 5
    backbone_depth: int = 4
    channels: tuple[int, ...] = (16, 32, 64, 64)
    anchors: AnchorSpec = field(default_factory=AnchorSpec)
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    score_threshold: float = 0.5
    nms_threshold: float = 0.5
    max_side: int = 1024
    lr: float = 1e-3
    rpn_batch: int = 128
    rpn_pos_fraction: float = 0.5
    rpn_nms: float = 0.7
    pre_nms_top: int = 600
    post_nms_train: int = 300
    post_nms_test: int = 100
    roi_batch: int = 64
    roi_pos_fraction: float = 0.25
    roi_pos_iou: float = 0.5
    pool_size: int = 7
    hidden: int = 256
    max_detections: int = 100
    min_box: float = 2.0
    pretrained_weights: str | None = None
    seed: int = 0

    def validate(self) -> "DetectorConfig":
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 <= self.neg_iou <= self.pos_iou <= 1.0:
            raise ValueError("need 0 <= neg_iou <= pos_iou <= 1")
        if self.backbone_depth < 1 or len(self.channels) != self.backbone_depth:
            raise ValueError("channels must list one width per backbone stage")
        if 2 ** self.backbone_depth != self.anchors.stride:
            raise ValueError(f"backbone stride {2 ** self.backbone_depth} != anchor stride {self.anchors.stride}")
        for name in ("score_threshold", "nms_threshold", "rpn_nms", "rpn_pos_fraction", "roi_pos_fraction",
                     "roi_pos_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.max_side < self.anchors.stride:
            raise ValueError("max_side smaller than the anchor stride")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["anchors"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["anchors"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        if "anchors" in d and isinstance(d["anchors"], dict):
            a = d["anchors"]
            d["anchors"] = AnchorSpec(int(a.get("stride", 16)), tuple(a.get("scales", (32.0, 64.0, 128.0))),
                                      tuple(a.get("aspect_ratios", (0.5, 1.0, 2.0))))
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass(frozen=True)
class BoxDelta:
    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.tx, self.ty, self.tw, self.th)):
            raise ValueError("box delta must be finite")

    def as_tuple(self):
        return (self.tx, self.ty, self.tw, self.th)


# ---------------------------------------------------------------- box math

def generate_anchors(image_size: tuple[int, int], spec: AnchorSpec) -> np.ndarray:
    """Anchors for an image of ``(height, width)``, shape ``(cells * A, 4)``.

    Order is row-major over cells, then scales, then ratios. A ratio ``r`` is
    width/height with area ``scale ** 2``.
    """
    h, w = image_size
    if h < spec.stride or w < spec.stride:
        raise ValueError("image smaller than the anchor stride")
    fh, fw = math.ceil(h / spec.stride), math.ceil(w / spec.stride)
    base = []
    for s in spec.scales:
        for r in spec.aspect_ratios:
            aw, ah = s * math.sqrt(r), s / math.sqrt(r)
            base.append((-aw / 2, -ah / 2, aw / 2, ah / 2))
    base = np.asarray(base, dtype=np.float64)
    cy = (np.arange(fh) + 0.5) * spec.stride
    cx = (np.arange(fw) + 0.5) * spec.stride
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    shifts = np.stack([cxx, cyy, cxx, cyy], axis=-1).reshape(-1, 1, 4)
    return (shifts + base[None]).reshape(-1, 4)


def anchor_boxes(image_size, spec: AnchorSpec) -> list[BoundingBox]:
    return [BoundingBox(*a) for a in generate_anchors(image_size, spec)]


def _centers(b):
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return b[:, 0] + 0.5 * w, b[:, 1] + 0.5 * h, w, h


def encode_boxes(gt: np.ndarray, anchors: np.ndarray, weights=RPN_WEIGHTS) -> np.ndarray:
    gx, gy, gw, gh = _centers(np.asarray(gt, dtype=np.float64).reshape(-1, 4))
    ax, ay, aw, ah = _centers(np.asarray(anchors, dtype=np.float64).reshape(-1, 4))
    wx, wy, ww, wh = weights
    return np.stack([wx * (gx - ax) / aw, wy * (gy - ay) / ah, ww * np.log(gw / aw), wh * np.log(gh / ah)], axis=1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray, weights=RPN_WEIGHTS, image_size=None,
                 clamp: float | None = None) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; clips to ``(height, width)`` when given."""
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    ax, ay, aw, ah = _centers(np.asarray(anchors, dtype=np.float64).reshape(-1, 4))
    wx, wy, ww, wh = weights
    tw, th = d[:, 2] / ww, d[:, 3] / wh
    if clamp is not None:
        tw, th = np.minimum(tw, clamp), np.minimum(th, clamp)
    cx = d[:, 0] / wx * aw + ax
    cy = d[:, 1] / wy * ah + ay
    w, h = aw * np.exp(tw), ah * np.exp(th)
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if image_size is not None:
        out = clip_boxes(out, image_size)
    return out


def clip_boxes(boxes: np.ndarray, image_size) -> np.ndarray:
    h, w = image_size
    out = np.array(boxes, dtype=np.float64, copy=True)
    out[:, [0, 2]] = out[:, [0, 2]].clip(0, w)
    out[:, [1, 3]] = out[:, [1, 3]].clip(0, h)
    return out


def encode_box(gt: BoundingBox, anchor: BoundingBox) -> BoxDelta:
    return BoxDelta(*encode_boxes(np.array([gt.as_tuple()]), np.array([anchor.as_tuple()]))[0])


def decode_box(delta: BoxDelta, anchor: BoundingBox, image_size=None) -> BoundingBox:
    """Box from a delta; clipped to ``(height, width)`` when given."""
    b = decode_boxes(np.array([delta.as_tuple()]), np.array([anchor.as_tuple()]), image_size=image_size)[0]
    return BoundingBox(*b)


@dataclass
class AnchorTargets:
    labels: np.ndarray  # 1 positive, 0 negative, -1 ignore
    deltas: np.ndarray  # (N, 4), zero except for positives
    matched: np.ndarray  # best gt index per anchor (-1 when no gt)

    POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


def assign_anchor_targets(anchors, gt_boxes, pos_iou: float = 0.7, neg_iou: float = 0.3,
                          weights=RPN_WEIGHTS) -> AnchorTargets:
    """Label anchors positive / negative / ignore and regress positives to their best gt."""
    if not 0.0 <= neg_iou <= pos_iou <= 1.0:
        raise ValueError("need 0 <= neg_iou <= pos_iou <= 1")
    A = anchors if isinstance(anchors, np.ndarray) else boxes_to_array(anchors)
    A = np.asarray(A, dtype=np.float64).reshape(-1, 4)
    G = gt_boxes if isinstance(gt_boxes, np.ndarray) else boxes_to_array(list(gt_boxes))
    G = np.asarray(G, dtype=np.float64).reshape(-1, 4)
    n = len(A)
    labels = np.full(n, AnchorTargets.IGNORE, dtype=np.int64)
    deltas = np.zeros((n, 4))
    if len(G) == 0:
        labels[:] = AnchorTargets.NEGATIVE
        return AnchorTargets(labels, deltas, np.full(n, -1, dtype=np.int64))
    ious = iou_matrix(A, G)
    best_gt = ious.argmax(axis=1)
    best = ious[np.arange(n), best_gt]
    labels[best < neg_iou] = AnchorTargets.NEGATIVE
    labels[best >= pos_iou] = AnchorTargets.POSITIVE
    gt_best = ious.max(axis=0)
    for j in range(len(G)):
        forced = np.nonzero(ious[:, j] == gt_best[j])[0] if gt_best[j] > 0 else np.array([int(ious[:, j].argmax())])
        labels[forced] = AnchorTargets.POSITIVE
        # a forced anchor that overlaps another gt more still regresses to its own best gt
    pos = labels == AnchorTargets.POSITIVE
    deltas[pos] = encode_boxes(G[best_gt[pos]], A[pos], weights)
    return AnchorTargets(labels, deltas, best_gt)


def _sample(labels: np.ndarray, batch: int, pos_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    pos = np.nonzero(labels == 1)[0]
    neg = np.nonzero(labels == 0)[0]
    n_pos = min(len(pos), int(batch * pos_fraction))
    n_neg = min(len(neg), batch - n_pos)
    pos = rng.choice(pos, size=n_pos, replace=False) if n_pos < len(pos) else pos
    neg = rng.choice(neg, size=n_neg, replace=False) if n_neg < len(neg) else neg
    return np.sort(pos), np.sort(neg)


# ---------------------------------------------------------------- network

class _Net(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        layers, c_in = [], 3
        for i, c in enumerate(cfg.channels):
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            if i >= 2:
                layers += [nn.Conv2d(c, c, 3, padding=1), nn.ReLU(inplace=True)]
            c_in = c
        self.backbone = nn.Sequential(*layers)
        a = cfg.anchors.per_cell
        self.rpn_conv = nn.Conv2d(c_in, c_in, 3, padding=1)
        self.rpn_obj = nn.Conv2d(c_in, a, 1)
        self.rpn_reg = nn.Conv2d(c_in, 4 * a, 1)
        self.fc = nn.Linear(c_in * cfg.pool_size ** 2, cfg.hidden)
        self.cls = nn.Linear(cfg.hidden, 1)
        self.reg = nn.Linear(cfg.hidden, 4)
        self.pool_size = cfg.pool_size
        self.scale = 1.0 / cfg.anchors.stride

    def rpn(self, x):
        feat = self.backbone(x)
        h = F.relu(self.rpn_conv(feat))
        n = x.shape[0]
        obj = self.rpn_obj(h).permute(0, 2, 3, 1).reshape(n, -1)
        reg = self.rpn_reg(h).permute(0, 2, 3, 1).reshape(n, -1, 4)
        return feat, obj, reg

    def head(self, feat, rois: list[torch.Tensor]):
        pooled = roi_pool(feat, rois, self.pool_size, self.scale)
        h = F.relu(self.fc(pooled.flatten(1)))
        return self.cls(h).squeeze(1), self.reg(h)


def _smooth_l1(pred, target, beta=1.0 / 9.0):
    return F.smooth_l1_loss(pred, target, beta=beta, reduction="sum")


@dataclass
class DetectorModel:
    config: DetectorConfig
    net: _Net | None = None
    meta: dict = field(default_factory=dict)
    trained: bool = False

    def __post_init__(self):
        self.config.validate()
        if self.net is None:
            self.net = _Net(self.config)
            init_module(self.net, self.config.seed)
            # near-zero regression heads so early proposals stay on their anchors
            with torch.no_grad():
                for layer in (self.net.rpn_reg, self.net.reg):
                    layer.weight.mul_(0.01)
            if self.config.pretrained_weights:
                self.load_backbone(self.config.pretrained_weights)

    def load_backbone(self, path: str) -> None:
        """Optional pretrained-weights hook: an ``.npz`` of backbone state arrays."""
        from .nn_common import load_numpy_state

        with np.load(path) as z:
            load_numpy_state(self.net.backbone, {k: z[k] for k in z.files})


def _prepare(image: np.ndarray, max_side: int, stride: int):
    """Resize so the longer side is at most ``max_side``; pad to a stride multiple (white)."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got {img.shape}")
    h, w = img.shape[:2]
    scale = min(1.0, max_side / max(h, w))
    if scale < 1.0:
        nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
        img = np.asarray(Image.fromarray(img).resize((nw, nh), Image.BILINEAR))
    else:
        nh, nw = h, w
    ph, pw = math.ceil(nh / stride) * stride, math.ceil(nw / stride) * stride
    if (ph, pw) != (nh, nw):
        out = np.full((ph, pw, 3), 255, dtype=np.uint8)
        out[:nh, :nw] = img
        img = out
    # exact per-axis scale factors
    return img, (nh / h, nw / w), (nh, nw)


def _proposals(obj, reg, anchors, size, cfg: DetectorConfig, post_top: int) -> np.ndarray:
    scores = obj.detach().numpy()
    deltas = reg.detach().numpy()
    k = min(cfg.pre_nms_top, len(scores))
    top = np.argsort(-scores, kind="stable")[:k]
    boxes = decode_boxes(deltas[top], anchors[top], RPN_WEIGHTS, image_size=size, clamp=BBOX_CLIP)
    keep = ((boxes[:, 2] - boxes[:, 0]) >= cfg.min_box) & ((boxes[:, 3] - boxes[:, 1]) >= cfg.min_box)
    boxes, s = boxes[keep], scores[top][keep]
    if len(boxes) == 0:
        return np.zeros((0, 4))
    kept = tv_nms(torch.from_numpy(boxes), torch.from_numpy(s.astype(np.float64)), cfg.rpn_nms).numpy()
    return boxes[kept[:post_top]]


def _batch_loss(model: DetectorModel, images, gts, anchors, size, rng):
    cfg = model.config
    net = model.net
    x = image_tensor(np.stack(images))
    feat, obj, reg = net.rpn(x)
    n_img = len(images)
    rpn_cls, rpn_reg, roi_cls, roi_reg = [], [], [], []
    rois, roi_labels, roi_targets = [], [], []
    for i in range(n_img):
        t = assign_anchor_targets(anchors, gts[i], cfg.pos_iou, cfg.neg_iou)
        pos, neg = _sample(t.labels, cfg.rpn_batch, cfg.rpn_pos_fraction, rng)
        idx = np.concatenate([pos, neg])
        target = torch.from_numpy(np.r_[np.ones(len(pos)), np.zeros(len(neg))]).float()
        rpn_cls.append(F.binary_cross_entropy_with_logits(obj[i, idx], target, reduction="sum") / max(len(idx), 1))
        if len(pos):
            rpn_reg.append(_smooth_l1(reg[i, pos], torch.from_numpy(t.deltas[pos]).float()) / max(len(idx), 1))
        props = _proposals(obj[i], reg[i], anchors, size, cfg, cfg.post_nms_train)
        g = np.asarray(gts[i], dtype=np.float64).reshape(-1, 4)
        props = np.concatenate([props, g]) if len(g) else props
        if len(props) == 0:
            props = anchors[:1].copy()
        if len(g):
            ious = iou_matrix(props, g)
            best_gt, best = ious.argmax(1), ious.max(1)
            lab = (best >= cfg.roi_pos_iou).astype(np.int64)
        else:
            best_gt = np.zeros(len(props), dtype=np.int64)
            lab = np.zeros(len(props), dtype=np.int64)
        p_pos, p_neg = _sample(lab, cfg.roi_batch, cfg.roi_pos_fraction, rng)
        sel = np.concatenate([p_pos, p_neg])
        rois.append(torch.from_numpy(props[sel]).float())
        roi_labels.append(np.r_[np.ones(len(p_pos)), np.zeros(len(p_neg))])
        tg = np.zeros((len(sel), 4))
        if len(p_pos):
            tg[: len(p_pos)] = encode_boxes(g[best_gt[p_pos]], props[p_pos], ROI_WEIGHTS)
        roi_targets.append(tg)
    logits, deltas = net.head(feat, rois)
    start = 0
    for i in range(n_img):
        n = len(roi_labels[i])
        lg, dl = logits[start:start + n], deltas[start:start + n]
        lab = torch.from_numpy(roi_labels[i]).float()
        roi_cls.append(F.binary_cross_entropy_with_logits(lg, lab, reduction="sum") / max(n, 1))
        n_pos = int(roi_labels[i].sum())
        if n_pos:
            roi_reg.append(_smooth_l1(dl[:n_pos], torch.from_numpy(roi_targets[i][:n_pos]).float()) / max(n, 1))
        start += n
    zero = torch.zeros(())
    parts = {
        "rpn_cls": sum(rpn_cls) / n_img,
        "rpn_reg": (sum(rpn_reg) if rpn_reg else zero) / n_img,
        "roi_cls": sum(roi_cls) / n_img,
        "roi_reg": (sum(roi_reg) if roi_reg else zero) / n_img,
    }
    return parts


def _prepared(slides, cfg):
    images, gts, size = [], [], None
    for image, boxes in slides:
        img, (sy, sx), s = _prepare(image, cfg.max_side, cfg.anchors.stride)
        if size is None:
            size = img.shape[:2]
        elif img.shape[:2] != size:
            raise ValueError("all training slides must share one size after resizing")
        b = boxes_to_array(list(boxes)) if len(boxes) else np.zeros((0, 4))
        images.append(img)
        gts.append(b * np.array([sx, sy, sx, sy]))
    return images, gts, size


def train_detector(slides: Sequence[tuple[np.ndarray, Sequence[BoundingBox]]], config: DetectorConfig | None = None,
                   log=None) -> DetectorModel:
    """Joint training of proposal and region heads.

    ``slides`` is a sequence of ``(image, gt_boxes)``. Batches of
    ``batch_size`` slides are visited in a seeded shuffled order each epoch;
    the summed four-term loss (objectness BCE, proposal smooth-L1, region
    BCE, region smooth-L1) is minimized with Adam.
    """
    cfg = (config or DetectorConfig()).validate()
    if not slides:
        raise TrainingError("empty training set")
    if not any(len(b) for _, b in slides):
        raise TrainingError("no ground-truth boxes in the training set")
    images, gts, size = _prepared(slides, cfg)
    anchors = generate_anchors(size, cfg.anchors)
    model = DetectorModel(cfg)
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = []
    t0 = time.perf_counter()
    model.net.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        sums = {}
        n_batches = 0
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            parts = _batch_loss(model, [images[i] for i in idx], [gts[i] for i in idx], anchors, size, rng)
            loss = sum(parts.values())
            check_finite(loss, f"epoch {epoch} batch {b // cfg.batch_size}", parts)
            opt.zero_grad()
            loss.backward()
            opt.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            sums["total"] = sums.get("total", 0.0) + float(loss.detach())
            n_batches += 1
        rec = {k: v / n_batches for k, v in sums.items()}
        history.append(rec)
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {rec['total']:.4f}")
    model.net.eval()
    model.trained = True
    model.meta = {"seed": cfg.seed, "epochs": cfg.epochs, "history": history,
                  "final_loss": history[-1]["total"], "train_seconds": time.perf_counter() - t0,
                  "n_slides": len(images)}
    return model


@torch.no_grad()
def detect(image: np.ndarray, model: DetectorModel) -> list[Detection]:
    """Detections in original image coordinates, scores descending, NMS applied."""
    if not model.trained:
        raise UntrainedModelError("detector model is not trained")
    cfg = model.config
    h0, w0 = np.asarray(image).shape[:2]
    img, (sy, sx), valid = _prepare(image, cfg.max_side, cfg.anchors.stride)
    anchors = generate_anchors(img.shape[:2], cfg.anchors)
    model.net.eval()
    feat, obj, reg = model.net.rpn(image_tensor(img))
    props = _proposals(obj[0], reg[0], anchors, valid, cfg, cfg.post_nms_test)
    if len(props) == 0:
        return []
    logits, deltas = model.net.head(feat, [torch.from_numpy(props).float()])
    scores = torch.sigmoid(logits).numpy().astype(np.float64)
    boxes = decode_boxes(deltas.numpy(), props, ROI_WEIGHTS, image_size=valid, clamp=BBOX_CLIP)
    boxes = boxes / np.array([sx, sy, sx, sy])
    boxes = clip_boxes(boxes, (h0, w0))
    ok = (scores >= cfg.score_threshold) & (boxes[:, 2] - boxes[:, 0] > 0) & (boxes[:, 3] - boxes[:, 1] > 0)
    boxes, scores = boxes[ok], scores[ok]
    if len(boxes) == 0:
        return []
    keep = tv_nms(torch.from_numpy(boxes), torch.from_numpy(scores), cfg.nms_threshold).numpy()
    keep = keep[np.argsort(-scores[keep], kind="stable")][: cfg.max_detections]
    return [Detection(BoundingBox(*boxes[i]), float(min(max(scores[i], 0.0), 1.0))) for i in keep]


def square_crop(image: np.ndarray, box: BoundingBox, padding: float = 0.1) -> np.ndarray:
    """Square crop centered on ``box`` with side ``max(w, h) * (1 + 2 * padding)``.

    Parts outside the image are filled white so the crop stays centered.
    """
    img = np.asarray(image)
    side = max(1, int(round(max(box.width, box.height) * (1.0 + 2.0 * padding))))
    cx, cy = box.center
    x0 = int(round(cx - side / 2.0))
    y0 = int(round(cy - side / 2.0))
    out = np.full((side, side, 3), 255, dtype=np.uint8)
    h, w = img.shape[:2]
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + side, w), min(y0 + side, h)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = img[sy0:sy1, sx0:sx1]
    return out


def crop_true_positives(image, detections: Sequence[Detection], gt: Sequence[tuple[BoundingBox, frozenset]],
                        iou_threshold: float = 0.5, padding: float = 0.1, slide_id: str = "",
                        patient_id: str = "") -> list[LabeledCrop]:
    """Crops of detections matched to ground truth, labeled with the matched truth's classes."""
    if not detections or not gt:
        return []
    m = match_detections(list(detections), [b for b, _ in gt], iou_threshold)
    crops = []
    for p, t in sorted(m.tp, key=lambda pt: pt[1]):
        crops.append(LabeledCrop(square_crop(image, detections[p].box, padding), to_vector(gt[t][1]),
                                 crop_id=f"{slide_id}#{t}", patient_id=patient_id))
    return crops
