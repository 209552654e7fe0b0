"""Multi-label glomerulus phenotype classifier.

Two conv blocks (3x3 conv, ReLU, 2x2 max-pool), flatten, one fully
connected layer with independent sigmoids. A 2-way Normal/Sclerosed model is
pretrained first; fine-tuning copies the conv blocks and attaches a fresh
9-way head.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .augment import LabeledCrop, oversample_weights, sample_mix_pairs
from .classes import N_GLOM_CLASSES, GlomerulusClass
from .metrics import MultiLabelMetrics, multilabel_metrics
from .nn_common import TrainingError, UntrainedModelError, check_finite, image_tensor, init_module, seeded_generator


class NotFineTunedError(UntrainedModelError):
    def __init__(self):
        super().__init__("model not fine-tuned")


@dataclass
class ClassifierConfig:
    input_side: int = 128
    channels: tuple[int, int] = (32, 64)
    pretrain_epochs: int = 30
    finetune_epochs: int = 20
    threshold: float = 0.45
    train_fraction: float = 0.6
    lr: float = 1e-3
    optimizer: str = "adam"  # or "sgd"
    batch_size: int = 32
    mix_count: int = 0  # CircleMix samples added to the fine-tuning set
    oversample: bool = True
    seed: int = 0

    def validate(self) -> "ClassifierConfig":
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.input_side < 4 or self.input_side % 4:
            raise ValueError("input_side must be a positive multiple of 4")
        if len(self.channels) != 2 or min(self.channels) < 1:
            raise ValueError("two positive conv widths required")
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0 or self.batch_size < 1 or self.mix_count < 0:
            raise ValueError("epochs, batch_size and mix_count must be non-negative (batch_size positive)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


class _Net(nn.Module):
    def __init__(self, side: int, channels, arity: int):
        super().__init__()
        c1, c2 = channels
        self.features = nn.Sequential(
            nn.Conv2d(3, c1, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(c1, c2, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        )
        self.head = nn.Linear(c2 * (side // 4) ** 2, arity)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


@dataclass
class ClassifierModel:
    config: ClassifierConfig
    arity: int = 2
    net: _Net | None = None
    trained: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.config.validate()
        if self.arity not in (2, N_GLOM_CLASSES):
            raise ValueError("head arity must be 2 or 9")
        if self.net is None:
            self.net = _Net(self.config.input_side, self.config.channels, self.arity)
            init_module(self.net, self.config.seed)
        if self.net.head.out_features != self.arity:
            raise ValueError("network head does not match arity")

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())


def resize_crop(image: np.ndarray, side: int) -> np.ndarray:
    img = np.asarray(image)
    if img.shape[:2] == (side, side):
        return img
    return np.asarray(Image.fromarray(img).resize((side, side), Image.BILINEAR))


def _stack(images, side) -> torch.Tensor:
    return image_tensor(np.stack([resize_crop(im, side) for im in images]))


def _optimizer(cfg, params):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr)
    return torch.optim.Adam(params, lr=cfg.lr)


def _fit(model: ClassifierModel, x: torch.Tensor, y: torch.Tensor, epochs: int, weights, seed: int, log, tag):
    """Minibatch BCE training; samples are drawn by ``weights`` (with replacement) or shuffled."""
    cfg = model.config
    opt = _optimizer(cfg, model.net.parameters())
    g = seeded_generator(seed)
    n = len(x)
    history = []
    model.net.train()
    for epoch in range(epochs):
        if weights is not None:
            order = torch.multinomial(torch.as_tensor(weights, dtype=torch.float64), n, replacement=True, generator=g)
        else:
            order = torch.randperm(n, generator=g)
        total, count = 0.0, 0
        for b in range(0, n, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            logits = model.net(x[idx])
            loss = F.binary_cross_entropy_with_logits(logits, y[idx])
            check_finite(loss, f"{tag} epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        history.append(total / count)
        if log:
            log(f"{tag} epoch {epoch + 1}/{epochs} loss {history[-1]:.4f}")
    model.net.eval()
    return history


def _binary_targets(dataset) -> tuple[list, np.ndarray]:
    images, ys = [], []
    for item in dataset:
        if isinstance(item, LabeledCrop):
            img, lab = item.image, item.labels
        else:
            img, lab = item
        lab = np.asarray(lab, dtype=np.float64).reshape(-1)
        if lab.size == N_GLOM_CLASSES:
            extra = np.delete(lab, [GlomerulusClass.Normal, GlomerulusClass.Sclerosed])
            if extra.any():
                raise ValueError("pretraining data must be labeled Normal or Sclerosed only")
            lab = lab[[GlomerulusClass.Normal, GlomerulusClass.Sclerosed]]
        if lab.size != 2:
            raise ValueError("pretraining labels must be 2-dim (normal, sclerosed) or 9-dim")
        images.append(img)
        ys.append(lab)
    return images, np.asarray(ys)


def pretrain(dataset, config: ClassifierConfig | None = None, log=None) -> ClassifierModel:
    """Train a 2-way (normal, sclerosed) model on ``(image, label)`` pairs or crops."""
    cfg = (config or ClassifierConfig()).validate()
    if len(dataset) == 0:
        raise TrainingError("empty pretraining dataset")
    images, y = _binary_targets(dataset)
    model = ClassifierModel(cfg, arity=2)
    t0 = time.perf_counter()
    x = _stack(images, cfg.input_side)
    hist = _fit(model, x, torch.as_tensor(y, dtype=torch.float32), cfg.pretrain_epochs, None, cfg.seed, log,
                "pretrain")
    model.trained = True
    model.meta = {"stage": "pretrain", "seed": cfg.seed, "epochs": cfg.pretrain_epochs, "history": hist,
                  "n_samples": len(images), "train_seconds": time.perf_counter() - t0}
    return model


def finetune(model: ClassifierModel, dataset: Sequence[LabeledCrop], config: ClassifierConfig | None = None,
             log=None) -> ClassifierModel:
    """Copy the conv blocks of a 2-way model, attach a new 9-way head and train on multi-label crops.

    With ``mix_count > 0`` that many CircleMix samples (seeded) are appended to
    the training set first; with ``oversample`` the epoch draws follow
    inverse-label-frequency weights over the enlarged set.
    """
    cfg = (config or model.config).validate()
    if model.arity != 2:
        raise ValueError(f"finetune expects a 2-way pretrained model, got arity {model.arity}")
    if not dataset:
        raise TrainingError("empty fine-tuning dataset")
    if cfg.input_side != model.config.input_side or tuple(cfg.channels) != tuple(model.config.channels):
        raise ValueError("fine-tuning config must keep the pretrained input_side and channels")
    items = [LabeledCrop(resize_crop(c.image, cfg.input_side), c.labels, c.crop_id, c.patient_id) for c in dataset]
    if cfg.mix_count:
        items = items + sample_mix_pairs(items, cfg.mix_count, seed=cfg.seed + 1)
    new = ClassifierModel(cfg, arity=N_GLOM_CLASSES)
    new.net.features.load_state_dict(model.net.features.state_dict())
    init_module(new.net.head, cfg.seed + 2)
    labels = np.stack([c.labels for c in items])
    weights = oversample_weights(labels > 0) if cfg.oversample else None
    t0 = time.perf_counter()
    x = image_tensor(np.stack([c.image for c in items]))
    hist = _fit(new, x, torch.as_tensor(labels, dtype=torch.float32), cfg.finetune_epochs, weights, cfg.seed + 3,
                log, "finetune")
    new.trained = True
    new.meta = {"stage": "finetune", "seed": cfg.seed, "epochs": cfg.finetune_epochs, "history": hist,
                "n_samples": len(dataset), "n_mixed": cfg.mix_count,
                "pretrain": {k: v for k, v in model.meta.items() if k != "history"},
                "train_seconds": time.perf_counter() - t0}
    return new


@torch.no_grad()
def predict_proba(images, model: ClassifierModel, batch: int = 256) -> np.ndarray:
    """Sigmoid outputs for a list of crops, shape ``(n, arity)``."""
    if not model.trained:
        raise UntrainedModelError("classifier model is not trained")
    model.net.eval()
    out = []
    for b in range(0, len(images), batch):
        x = _stack(images[b:b + batch], model.config.input_side)
        out.append(torch.sigmoid(model.net(x)).double().numpy())
    if not out:
        return np.zeros((0, model.arity))
    return np.concatenate(out)


def classify(crop, model: ClassifierModel) -> np.ndarray:
    """Nine independent probabilities for one crop (RGB array or :class:`LabeledCrop`)."""
    if model.arity != N_GLOM_CLASSES:
        raise NotFineTunedError()
    img = crop.image if isinstance(crop, LabeledCrop) else crop
    return predict_proba([img], model)[0]


def apply_threshold(p, threshold: float = 0.45) -> frozenset[GlomerulusClass]:
    """Classes with probability above ``threshold``; the argmax class if none is."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    chosen = np.nonzero(p > threshold)[0]
    if len(chosen) == 0:
        chosen = [int(np.argmax(p))]
    return frozenset(GlomerulusClass(int(i)) for i in chosen)


def evaluate_classifier(model: ClassifierModel, dataset: Sequence[LabeledCrop],
                        threshold: float | None = None) -> MultiLabelMetrics:
    if model.arity != N_GLOM_CLASSES:
        raise NotFineTunedError()
    thr = model.config.threshold if threshold is None else threshold
    probs = predict_proba([c.image for c in dataset], model)
    preds = [apply_threshold(p, thr) for p in probs]
    truths = [frozenset(np.nonzero(np.asarray(c.labels) >= 0.5)[0].tolist()) for c in dataset]
    return multilabel_metrics(preds, truths)


def binary_accuracy(model: ClassifierModel, dataset) -> float:
    """Argmax accuracy of a 2-way model on normal/sclerosed data."""
    images, y = _binary_targets(dataset)
    p = predict_proba(images, model)
    return float(np.mean(p.argmax(1) == y.argmax(1)))


def bce_loss(model: ClassifierModel, images: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(model.net(images), targets)
