"""Per-patient frequency vectors and the LN-class network (9 -> h1 -> h2 -> 6)."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .classes import N_GLOM_CLASSES, N_LN_CLASSES, LNClass, to_vector
from .nn_common import TrainingError, UntrainedModelError, check_finite, init_module


class NoGlomeruliError(ValueError):
    def __init__(self, patient_id: str = ""):
        super().__init__(f"no glomeruli for patient {patient_id}".strip())
        self.patient_id = patient_id


@dataclass
class PatientRecord:
    patient_id: str
    slide_ids: list
    glomerulus_label_sets: list
    ln_class: LNClass | None = None

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")
        if self.ln_class is not None:
            self.ln_class = LNClass.parse(self.ln_class)


@dataclass(frozen=True)
class FrequencyVector:
    counts: tuple[int, ...]
    n_glomeruli: int

    def __post_init__(self):
        if len(self.counts) != N_GLOM_CLASSES:
            raise ValueError("frequency vector needs 9 counts")
        if self.n_glomeruli <= 0:
            raise NoGlomeruliError()
        if any(c < 0 or c > self.n_glomeruli for c in self.counts):
            raise ValueError("counts must lie in [0, n_glomeruli]")

    @property
    def normalized(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.float64) / self.n_glomeruli

    def to_dict(self) -> dict:
        return {"counts": list(self.counts), "n_glomeruli": self.n_glomeruli,
                "normalized": self.normalized.tolist()}

    @classmethod
    def from_counts(cls, counts, n_glomeruli: int) -> "FrequencyVector":
        return cls(tuple(int(c) for c in counts), int(n_glomeruli))


def frequency_vector(label_sets: Iterable, patient_id: str = "") -> FrequencyVector:
    """Count, per class, the glomeruli whose label set contains it."""
    vecs = [to_vector(s) if not isinstance(s, np.ndarray) else (np.asarray(s) > 0).astype(np.float64)
            for s in label_sets]
    if not vecs:
        raise NoGlomeruliError(patient_id)
    counts = np.sum(vecs, axis=0).astype(np.int64)
    return FrequencyVector.from_counts(counts, len(vecs))


def aggregate(records: Iterable[tuple[str, object]]) -> dict[str, FrequencyVector]:
    """``(patient_id, label set)`` pairs -> frequency vector per patient (first-seen order)."""
    grouped: dict[str, list] = {}
    for pid, labels in records:
        grouped.setdefault(pid, []).append(labels)
    return {pid: frequency_vector(sets, pid) for pid, sets in grouped.items()}


def patient_frequency(record: PatientRecord) -> FrequencyVector:
    return frequency_vector(record.glomerulus_label_sets, record.patient_id)


@dataclass
class LNConfig:
    hidden: tuple[int, int] = (32, 16)
    epochs: int = 500
    lr: float = 1e-2
    seed: int = 0

    def validate(self) -> "LNConfig":
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ValueError("two positive hidden widths required")
        if self.epochs < 1 or self.lr <= 0:
            raise ValueError("epochs and lr must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LNConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


class _MLP(nn.Module):
    def __init__(self, hidden):
        super().__init__()
        h1, h2 = hidden
        self.layers = nn.Sequential(nn.Linear(N_GLOM_CLASSES, h1), nn.ReLU(), nn.Linear(h1, h2), nn.ReLU(),
                                    nn.Linear(h2, N_LN_CLASSES))

    def forward(self, x):
        return self.layers(x)


@dataclass
class LNModel:
    config: LNConfig
    net: _MLP | None = None
    trained: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.config.validate()
        if self.net is None:
            self.net = _MLP(self.config.hidden)
            init_module(self.net, self.config.seed)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())


def _inputs(patients: Sequence[PatientRecord]) -> np.ndarray:
    return np.stack([patient_frequency(p).normalized for p in patients])


def train_ln_classifier(patients: Sequence[PatientRecord], config: LNConfig | None = None, log=None) -> LNModel:
    """Full-batch Adam on softmax cross-entropy over normalized frequency vectors."""
    cfg = (config or LNConfig()).validate()
    labelled = [p for p in patients if p.ln_class is not None]
    if len(labelled) != len(patients):
        raise TrainingError("every training patient needs an LN class")
    if len({p.ln_class for p in labelled}) < 2:
        raise TrainingError("need at least two distinct LN classes to train")
    x = torch.as_tensor(_inputs(labelled), dtype=torch.float32)
    y = torch.as_tensor([int(p.ln_class) for p in labelled], dtype=torch.long)
    model = LNModel(cfg)
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.lr)
    history = []
    t0 = time.perf_counter()
    model.net.train()
    for epoch in range(cfg.epochs):
        loss = F.cross_entropy(model.net(x), y)
        check_finite(loss, f"ln epoch {epoch}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if log and (epoch + 1) % 100 == 0:
            log(f"ln epoch {epoch + 1}/{cfg.epochs} loss {history[-1]:.4f}")
    model.net.eval()
    model.trained = True
    model.meta = {"seed": cfg.seed, "epochs": cfg.epochs, "history": history, "final_loss": history[-1],
                  "n_patients": len(labelled), "train_seconds": time.perf_counter() - t0}
    return model


@torch.no_grad()
def ln_probabilities(x: np.ndarray, model: LNModel) -> np.ndarray:
    if not model.trained:
        raise UntrainedModelError("LN model is not trained")
    model.net.eval()
    logits = model.net(torch.as_tensor(np.asarray(x, dtype=np.float32).reshape(-1, N_GLOM_CLASSES)))
    return torch.softmax(logits.double(), dim=1).numpy()


def predict_ln(freq: FrequencyVector, model: LNModel) -> tuple[LNClass, np.ndarray]:
    """Most probable LN class (lower index on ties) and the 6 class probabilities."""
    p = ln_probabilities(freq.normalized, model)[0]
    return LNClass(int(np.argmax(p))), p


@dataclass(frozen=True)
class LNEvaluation:
    accuracy: float
    precision: float
    recall: float
    confusion: np.ndarray  # rows truth, columns prediction

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "confusion": self.confusion.tolist()}


def ln_metrics(truth: Sequence[int], pred: Sequence[int]) -> LNEvaluation:
    """Accuracy, macro precision/recall over the classes present in ``truth``, 6x6 confusion."""
    if len(truth) != len(pred):
        raise ValueError("length mismatch")
    if not truth:
        raise ValueError("no patients")
    cm = np.zeros((N_LN_CLASSES, N_LN_CLASSES), dtype=np.int64)
    for t, p in zip(truth, pred):
        cm[int(t), int(p)] += 1
    present = [c for c in range(N_LN_CLASSES) if cm[c].sum() > 0]
    prec = [cm[c, c] / cm[:, c].sum() if cm[:, c].sum() else 0.0 for c in present]
    rec = [cm[c, c] / cm[c].sum() for c in present]
    acc = np.trace(cm) / cm.sum()
    return LNEvaluation(float(acc), math.fsum(prec) / len(prec), math.fsum(rec) / len(rec), cm)


def evaluate_ln(model: LNModel, patients: Sequence[PatientRecord]) -> LNEvaluation:
    probs = ln_probabilities(_inputs(patients), model)
    pred = [int(np.argmax(p)) for p in probs]
    return ln_metrics([int(p.ln_class) for p in patients], pred)
