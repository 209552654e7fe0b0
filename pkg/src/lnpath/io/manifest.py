"""Dataset manifest and the canonical JSON annotation form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..classes import LNClass, format_label_set, parse_label_set
from ..geometry import BoundingBox

MANIFEST_VERSION = 1
ANNOTATION_VERSION = 1


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SlideEntry:
    slide_id: str
    patient_id: str
    magnification: str
    image: str
    annotations: str | None = None

    def to_dict(self) -> dict:
        return {"slide_id": self.slide_id, "patient_id": self.patient_id, "magnification": self.magnification,
                "image": self.image, "annotations": self.annotations}


@dataclass(frozen=True)
class PatientEntry:
    patient_id: str
    ln_class: LNClass | None = None

    def to_dict(self) -> dict:
        return {"patient_id": self.patient_id, "ln_class": None if self.ln_class is None else self.ln_class.name}


@dataclass
class DatasetManifest:
    slides: list[SlideEntry] = field(default_factory=list)
    patients: list[PatientEntry] = field(default_factory=list)
    root: Path = field(default_factory=Path)
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        ids = [s.slide_id for s in self.slides]
        dup = {i for i in ids if ids.count(i) > 1}
        if dup:
            raise ManifestError(f"duplicate slide ids: {sorted(dup)}")
        pids = [p.patient_id for p in self.patients]
        if len(set(pids)) != len(pids):
            raise ManifestError("duplicate patient ids")
        missing = {s.patient_id for s in self.slides} - set(pids)
        if missing:
            raise ManifestError(f"slides reference unknown patients: {sorted(missing)}")

    def resolve(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def check_paths(self) -> None:
        for s in self.slides:
            for rel in (s.image, s.annotations):
                if rel is not None and not self.resolve(rel).exists():
                    raise ManifestError(f"slide {s.slide_id}: file not found: {rel}")

    def patient(self, patient_id: str) -> PatientEntry:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(patient_id)

    def slides_of(self, patient_id: str) -> list[SlideEntry]:
        return [s for s in self.slides if s.patient_id == patient_id]

    def subset(self, slide_ids) -> "DatasetManifest":
        keep = set(slide_ids)
        slides = [s for s in self.slides if s.slide_id in keep]
        pids = {s.patient_id for s in slides}
        return DatasetManifest(slides, [p for p in self.patients if p.patient_id in pids], self.root, self.version)

    def to_dict(self) -> dict:
        return {"version": self.version, "slides": [s.to_dict() for s in self.slides],
                "patients": [p.to_dict() for p in self.patients]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d: dict, root=".") -> "DatasetManifest":
        if d.get("version") != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {d.get('version')!r}")
        try:
            slides = [SlideEntry(str(s["slide_id"]), str(s["patient_id"]), str(s.get("magnification", "")),
                                 str(s["image"]), s.get("annotations")) for s in d.get("slides", [])]
            patients = [PatientEntry(str(p["patient_id"]),
                                     None if p.get("ln_class") is None else LNClass.parse(p["ln_class"]))
                        for p in d.get("patients", [])]
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed manifest entry: {exc}") from None
        return cls(slides, patients, Path(root))

    @classmethod
    def load(cls, path, check: bool = True) -> "DatasetManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from None
        m = cls.from_dict(d, root=path.parent)
        if check:
            m.check_paths()
        return m


def annotations_to_dict(annotations) -> dict:
    return {
        "version": ANNOTATION_VERSION,
        "boxes": [list(map(float, b.as_tuple())) for b, _ in annotations],
        "labels": [format_label_set(ls).split(";") if ls else [] for _, ls in annotations],
    }


def save_annotations(path, annotations) -> None:
    """``annotations``: sequence of ``(BoundingBox, label set)``."""
    Path(path).write_text(json.dumps(annotations_to_dict(annotations), indent=1, sort_keys=True) + "\n")


def load_annotations(path) -> list[tuple[BoundingBox, frozenset]]:
    path = Path(path)
    if path.suffix.lower() == ".xml":
        from .imagescope import parse_imagescope_xml

        return [(r.box, r.classes) for r in parse_imagescope_xml(path)]
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read annotations {path}: {exc}") from None
    if d.get("version") != ANNOTATION_VERSION or len(d.get("boxes", [])) != len(d.get("labels", [])):
        raise ManifestError(f"malformed annotation file {path}")
    return [(BoundingBox(*b), parse_label_set(";".join(ls))) for b, ls in zip(d["boxes"], d["labels"])]


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_image(path, image) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)
