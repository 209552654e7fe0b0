"""End-to-end orchestration: corpus files, splits, stage training and patient reports.

Per slide: stain-normalize, detect, crop, classify, threshold. Per patient:
aggregate the predicted label sets and predict the LN class.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import aggregation as agg
from .augment import LabeledCrop
from .classes import N_GLOM_CLASSES, LNClass, format_label_set, to_vector
from .classifier import apply_threshold, evaluate_classifier, finetune, predict_proba, pretrain, resize_crop
from .detector import crop_true_positives, detect, square_crop, train_detector
from .geometry import BoundingBox, Detection, match_detections
from .io.artifacts import MissingArtifactError, load_model, save_model
from .io.config import RunConfig
from .io.imagescope import write_imagescope_xml
from .io.manifest import (
    DatasetManifest, PatientEntry, SlideEntry, load_annotations, load_image, save_annotations, save_image,
)
from .metrics import evaluate_detections
from .stain import NoTissueError, StainStats, compute_stain_stats, normalize
from .synth import Cohort, binary_crop_dataset, generate_cohort

STAGES = ("stain-stats", "detector", "classifier", "ln")


class DataError(ValueError):
    """Bad or inconsistent input data (exit code 2 at the CLI)."""


# ---------------------------------------------------------------- corpus files

def write_cohort(cohort: Cohort, out_dir, xml: bool = True) -> DatasetManifest:
    """PNG slides, ImageScope XML (or canonical JSON) annotations and ``manifest.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(exist_ok=True)
    slides = []
    for s in cohort.slides:
        if s.image is None:
            raise DataError("cohort was generated without rendering; nothing to write")
        img_rel = f"images/{s.slide_id}.png"
        save_image(out / img_rel, s.image)
        regions = [(a.box, a.labels) for a in s.annotations]
        if xml:
            ann_rel = f"annotations/{s.slide_id}.xml"
            write_imagescope_xml(out / ann_rel, regions)
        else:
            ann_rel = f"annotations/{s.slide_id}.json"
            save_annotations(out / ann_rel, regions)
        slides.append(SlideEntry(s.slide_id, s.patient_id, s.magnification, img_rel, ann_rel))
    patients = [PatientEntry(p.patient_id, p.ln_class) for p in cohort.patients]
    m = DatasetManifest(slides, patients, out)
    m.save(out / "manifest.json")
    return m


def ingest(manifest: DatasetManifest, out_dir) -> DatasetManifest:
    """Convert every slide's annotations (XML or JSON) to canonical JSON under ``out_dir``."""
    out = Path(out_dir)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    slides = []
    for s in manifest.slides:
        ann = manifest.resolve(s.annotations)
        rel = None
        if ann is not None:
            rel = f"annotations/{s.slide_id}.json"
            save_annotations(out / rel, load_annotations(ann))
        img = manifest.resolve(s.image)
        slides.append(SlideEntry(s.slide_id, s.patient_id, s.magnification, str(img.resolve()), rel))
    m = DatasetManifest(slides, list(manifest.patients), out)
    m.save(out / "manifest.json")
    return m


def slide_annotations(manifest: DatasetManifest, entry: SlideEntry) -> list[tuple[BoundingBox, frozenset]]:
    path = manifest.resolve(entry.annotations)
    return [] if path is None else load_annotations(path)


def dataset_fingerprint(manifest: DatasetManifest, slide_ids) -> str:
    h = hashlib.sha256()
    for sid in sorted(slide_ids):
        h.update(sid.encode())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- splits

def patient_split(manifest: DatasetManifest, fractions=(0.6, 0.0, 0.4), seed: int = 0):
    """Train/val/test slide-id sets with every patient's slides in exactly one set.

    Patient counts per split follow largest-remainder rounding of
    ``fractions * n_patients`` so each split is within one patient of target.
    """
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    pids = sorted({s.patient_id for s in manifest.slides})
    n = len(pids)
    nonempty = sum(f > 0 for f in fr)
    if n < nonempty:
        raise DataError(f"{n} patients cannot fill {nonempty} non-empty splits")
    raw = [f * n for f in fr]
    counts = [math.floor(r) for r in raw]
    for i in sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))[: n - sum(counts)]:
        counts[i] += 1
    for i in range(3):  # a requested split never ends up empty
        if fr[i] > 0 and counts[i] == 0:
            j = max(range(3), key=lambda j: counts[j])
            counts[j] -= 1
            counts[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    groups, start = [], 0
    for c in counts:
        chosen = {pids[k] for k in order[start:start + c]}
        groups.append({s.slide_id for s in manifest.slides if s.patient_id in chosen})
        start += c
    return tuple(groups)


def save_split(path, split) -> None:
    Path(path).write_text(json.dumps({k: sorted(v) for k, v in zip(("train", "val", "test"), split)}, indent=1,
                                     sort_keys=True) + "\n")


def load_split(path):
    d = json.loads(Path(path).read_text())
    return tuple(set(d[k]) for k in ("train", "val", "test"))


# ---------------------------------------------------------------- stages

def _entries(manifest, slide_ids):
    ids = set(slide_ids)
    return sorted((s for s in manifest.slides if s.slide_id in ids), key=lambda s: s.slide_id)


def fit_stain_target(manifest: DatasetManifest, train_ids, config: RunConfig, target_slide: str | None = None
                     ) -> StainStats:
    """Target stain statistics from ``target_slide`` or else the first training slide (sorted by id)."""
    if target_slide is not None:
        entries = [s for s in manifest.slides if s.slide_id == target_slide]
        if not entries:
            raise DataError(f"target slide {target_slide!r} not in manifest")
    else:
        entries = _entries(manifest, train_ids)
    if not entries:
        raise DataError("no training slides for the stain reference")
    ref = entries[0]
    stats = compute_stain_stats(load_image(manifest.resolve(ref.image)), config.stain)
    stats.meta["reference_slide"] = ref.slide_id
    return stats


def normalized_slides(manifest, entries, stats: StainStats | None, config: RunConfig):
    for e in entries:
        img = load_image(manifest.resolve(e.image))
        if stats is not None:
            try:
                img = normalize(img, stats, config.stain)
            except NoTissueError:
                pass  # nothing stained to re-render; detection sees the raw slide
        yield e, img


def train_detector_stage(manifest, train_ids, stats, config: RunConfig, log=None):
    data = [(img, [b for b, _ in slide_annotations(manifest, e)])
            for e, img in normalized_slides(manifest, _entries(manifest, train_ids), stats, config)]
    model = train_detector(data, config.detector, log=log)
    model.meta["dataset_fingerprint"] = dataset_fingerprint(manifest, train_ids)
    return model


def detection_crops(manifest, slide_ids, stats, detector, config: RunConfig) -> list[LabeledCrop]:
    """True-positive crops (IoU >= 0.5) with the matched ground-truth labels."""
    crops = []
    for e, img in normalized_slides(manifest, _entries(manifest, slide_ids), stats, config):
        gt = slide_annotations(manifest, e)
        dets = detect(img, detector) if detector is not None else [Detection(b, 1.0) for b, _ in gt]
        for c in crop_true_positives(img, dets, gt, 0.5, slide_id=e.slide_id, patient_id=e.patient_id):
            crops.append(LabeledCrop(resize_crop(c.image, config.classifier.input_side), c.labels, c.crop_id,
                                     c.patient_id))
    return crops


def train_classifier_stage(manifest, train_ids, stats, detector, config: RunConfig, log=None):
    cfg = config.classifier
    binary = binary_crop_dataset(150, cfg.input_side, seed=cfg.seed)
    base = pretrain(binary, cfg, log=log)
    crops = detection_crops(manifest, train_ids, stats, detector, config)
    if not crops:
        raise DataError("no true-positive crops to fine-tune on")
    ft_cfg = replace(cfg, mix_count=config.augment.circlemix_count, oversample=config.augment.oversample)
    model = finetune(base, crops, ft_cfg, log=log)
    model.meta["dataset_fingerprint"] = dataset_fingerprint(manifest, train_ids)
    return model


def patient_records(manifest: DatasetManifest, slide_ids=None) -> list[agg.PatientRecord]:
    """Ground-truth records (annotation label sets) of the patients owning ``slide_ids``."""
    ids = None if slide_ids is None else set(slide_ids)
    out = []
    for p in manifest.patients:
        slides = [s for s in manifest.slides_of(p.patient_id) if ids is None or s.slide_id in ids]
        if not slides:
            continue
        sets = [ls for s in sorted(slides, key=lambda s: s.slide_id) for _, ls in slide_annotations(manifest, s)]
        out.append(agg.PatientRecord(p.patient_id, [s.slide_id for s in slides], sets, p.ln_class))
    return out


def train_ln_stage(manifest, train_ids, config: RunConfig, log=None):
    recs = [r for r in patient_records(manifest, train_ids) if r.glomerulus_label_sets]
    model = agg.train_ln_classifier(recs, config.ln, log=log)
    model.meta["dataset_fingerprint"] = dataset_fingerprint(manifest, train_ids)
    return model


def evaluate_detector_stage(manifest, slide_ids, stats, detector, config: RunConfig):
    preds, truths = {}, {}
    for e, img in normalized_slides(manifest, _entries(manifest, slide_ids), stats, config):
        truths[e.slide_id] = [b for b, _ in slide_annotations(manifest, e)]
        preds[e.slide_id] = detect(img, detector)
    return evaluate_detections(preds, truths)


def evaluate_classifier_stage(manifest, slide_ids, stats, detector, classifier, config: RunConfig):
    crops = detection_crops(manifest, slide_ids, stats, detector, config)
    if not crops:
        raise DataError("no true-positive crops to evaluate")
    return evaluate_classifier(classifier, crops)


# ---------------------------------------------------------------- inference

@dataclass
class PipelineArtifacts:
    stain: StainStats | None = None
    detector: object = None
    classifier: object = None
    ln: object = None
    # optional overrides: detect_fn(image, entry) and classify_fn(crops, entry, detections)
    detect_fn: Callable | None = None
    classify_fn: Callable | None = None

    def require(self):
        missing = []
        if self.stain is None:
            missing.append("stain-stats")
        if self.detector is None and self.detect_fn is None:
            missing.append("detector")
        if self.classifier is None and self.classify_fn is None:
            missing.append("classifier")
        if self.ln is None:
            missing.append("ln")
        if missing:
            raise MissingArtifactError(f"missing artifact for stage(s): {', '.join(missing)}")

    @classmethod
    def load(cls, directory) -> "PipelineArtifacts":
        d = Path(directory)
        missing = [k for k in STAGES if not (d / f"{k}.npz").exists()]
        if missing:
            raise MissingArtifactError(f"missing artifact for stage(s): {', '.join(missing)} in {d}")
        return cls(load_model(d / "stain-stats.npz", "stain-stats"), load_model(d / "detector.npz", "detector"),
                   load_model(d / "classifier.npz", "classifier"), load_model(d / "ln.npz", "ln"))


def _round(x, nd=6):
    return [round(float(v), nd) for v in x]


def run_pipeline(manifest: DatasetManifest, artifacts: PipelineArtifacts, config: RunConfig,
                 slide_ids=None, overlay_dir=None) -> dict:
    """Per-patient LN report over the manifest (or the given slides)."""
    artifacts.require()
    thr = config.classifier.threshold
    entries = _entries(manifest, slide_ids if slide_ids is not None else [s.slide_id for s in manifest.slides])
    slide_reports = []
    per_patient: dict[str, list] = {}
    for e, img in normalized_slides(manifest, entries, artifacts.stain, config):
        dets = artifacts.detect_fn(img, e) if artifacts.detect_fn else detect(img, artifacts.detector)
        crops = [square_crop(img, d.box, 0.1) for d in dets]
        if not crops:
            probs = np.zeros((0, N_GLOM_CLASSES))
        elif artifacts.classify_fn:
            probs = np.asarray(artifacts.classify_fn(crops, e, dets), dtype=np.float64)
        else:
            probs = predict_proba(crops, artifacts.classifier)
        label_sets = [apply_threshold(p, thr) for p in probs]
        per_patient.setdefault(e.patient_id, []).extend(label_sets)
        slide_reports.append({
            "slide_id": e.slide_id,
            "patient_id": e.patient_id,
            "magnification": e.magnification,
            "detections": [
                {"box": _round(d.box.as_tuple(), 2), "score": round(d.score, 6), "probabilities": _round(p),
                 "labels": format_label_set(ls).split(";")}
                for d, p, ls in zip(dets, probs, label_sets)
            ],
        })
        if overlay_dir is not None:
            draw_overlay(img, dets, label_sets, Path(overlay_dir) / f"{e.slide_id}.png")
    patients = []
    truth, pred = [], []
    for pid in sorted({e.patient_id for e in entries}):
        entry = manifest.patient(pid)
        sets = per_patient.get(pid, [])
        rec = {"patient_id": pid, "ground_truth": None if entry.ln_class is None else entry.ln_class.name}
        if not sets:
            rec.update(status="indeterminate", frequency=None, probabilities=None, predicted=None)
        else:
            fv = agg.frequency_vector(sets, pid)
            cls, p = agg.predict_ln(fv, artifacts.ln)
            rec.update(status="ok", frequency={"counts": list(fv.counts), "n_glomeruli": fv.n_glomeruli,
                                               "normalized": _round(fv.normalized)},
                       probabilities=_round(p), predicted=cls.name)
            if entry.ln_class is not None:
                truth.append(int(entry.ln_class))
                pred.append(int(cls))
        patients.append(rec)
    summary = {"n_slides": len(entries), "n_patients": len(patients),
               "n_indeterminate": sum(p["status"] == "indeterminate" for p in patients),
               "n_detections": sum(len(s["detections"]) for s in slide_reports)}
    if truth:
        ev = agg.ln_metrics(truth, pred)
        summary["ln"] = {"accuracy": ev.accuracy, "precision": ev.precision, "recall": ev.recall,
                         "confusion": ev.confusion.tolist()}
    return {
        "generated_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "config": _config_snapshot(config),
        "summary": summary,
        "patients": patients,
        "slides": slide_reports,
    }


def _config_snapshot(config: RunConfig) -> dict:
    from .io.config import to_dict

    return to_dict(config)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True) + "\n"


def strip_timestamp(report_text: str) -> str:
    d = json.loads(report_text)
    d.pop("generated_at", None)
    return json.dumps(d, sort_keys=True)


def summary_table(report: dict) -> str:
    lines = [f"{'patient':<10} {'status':<14} {'glomeruli':>9} {'predicted':>9} {'truth':>6}  top probability"]
    for p in report["patients"]:
        n = p["frequency"]["n_glomeruli"] if p["frequency"] else 0
        top = f"{max(p['probabilities']):.3f}" if p["probabilities"] else "-"
        lines.append(f"{p['patient_id']:<10} {p['status']:<14} {n:>9} {p['predicted'] or '-':>9} "
                     f"{p['ground_truth'] or '-':>6}  {top}")
    s = report["summary"]
    lines.append("")
    lines.append(f"slides {s['n_slides']}, patients {s['n_patients']}, detections {s['n_detections']}, "
                 f"indeterminate {s['n_indeterminate']}")
    if "ln" in s:
        lines.append(f"LN accuracy {s['ln']['accuracy']:.3f}  macro precision {s['ln']['precision']:.3f}  "
                     f"macro recall {s['ln']['recall']:.3f}")
    return "\n".join(lines) + "\n"


def draw_overlay(image, detections, label_sets, path) -> None:
    from PIL import Image, ImageDraw

    im = Image.fromarray(np.asarray(image))
    dr = ImageDraw.Draw(im)
    for d, ls in zip(detections, label_sets):
        b = d.box
        dr.rectangle([b.x_min, b.y_min, b.x_max, b.y_max], outline=(0, 160, 0), width=2)
        dr.text((b.x_min + 2, b.y_min + 2), f"{format_label_set(ls)} {d.score:.2f}", fill=(0, 0, 0))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    im.save(path)


# ---------------------------------------------------------------- oracles

def oracle_functions(manifest: DatasetManifest):
    """Detector/classifier stand-ins returning ground truth (for cross-checks)."""

    def detect_fn(image, entry):
        return [Detection(b, 1.0) for b, _ in slide_annotations(manifest, entry)]

    def classify_fn(crops, entry, dets):
        gt = slide_annotations(manifest, entry)
        m = match_detections(list(dets), [b for b, _ in gt], 0.5)
        out = np.zeros((len(dets), N_GLOM_CLASSES))
        for p, t in m.tp:
            out[p] = to_vector(gt[t][1])
        return out

    return detect_fn, classify_fn


# ---------------------------------------------------------------- whole run

def train_all(manifest: DatasetManifest, config: RunConfig, artifacts_dir, log=None):
    """Split, fit every stage, save all artifacts; returns (PipelineArtifacts, split)."""
    out = Path(artifacts_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = patient_split(manifest, config.split, config.seed)
    save_split(out / "split.json", split)
    train = split[0]
    stats = fit_stain_target(manifest, train, config)
    save_model(stats, out / "stain-stats.npz")
    det = train_detector_stage(manifest, train, stats, config, log)
    save_model(det, out / "detector.npz")
    cls = train_classifier_stage(manifest, train, stats, det, config, log)
    save_model(cls, out / "classifier.npz")
    ln = train_ln_stage(manifest, train, config, log)
    save_model(ln, out / "ln.npz")
    return PipelineArtifacts(stats, det, cls, ln), split


def synthesize(config: RunConfig, out_dir) -> DatasetManifest:
    return write_cohort(generate_cohort(config.synth.cohort_spec()), out_dir)
