"""Deterministic synthetic slides, glomeruli and patient cohorts.

Everything is rendered in two-stain concentration space (hematoxylin-like,
PAS-like) and converted to RGB through a per-slide stain basis, so the
stain normalizer sees genuinely different colourings. Phenotypes are
visually separable by construction: each class adds its own feature layer
(base hue, ring, nuclei texture, loops, blobs, crescent, adhesion tab), and
multi-label sets superimpose those layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .aggregation import PatientRecord
from .classes import N_GLOM_CLASSES, GlomerulusClass as G, LNClass, to_vector
from .geometry import BoundingBox
from .stain import PAS_REFERENCE, StainMatrix, compose

REFERENCE_COUNTS = (18, 25, 19, 10, 41, 10, 5, 14, 2)

TUFT_RADIUS = 0.80  # tuft edge in normalized elliptical radius; capsule at 1.0
CAPSULE_WIDTH = 0.06
TAB_REACH = 1.18  # adhesion tab pokes out past the capsule
WINDOW_REACH = 1.25


@dataclass(frozen=True)
class ClassStyle:
    """Rendering parameters for one phenotype.

    ``hue`` is a (hematoxylin, PAS) concentration pair for the feature,
    ``ring_thickness`` and ``feature_size`` are fractions of the glomerulus
    radius, ``texture_density`` is nuclei (or lumen/loop) density and
    ``eccentricity`` biases the outline shape.
    """

    hue: tuple[float, float]
    ring_thickness: float = 0.0
    texture_density: float = 0.0
    feature_size: float = 0.0
    eccentricity: float = 0.3


DEFAULT_STYLES: dict[G, ClassStyle] = {
    G.Normal: ClassStyle((0.14, 0.20), texture_density=0.010, feature_size=0.07, eccentricity=0.30),
    G.Sclerosed: ClassStyle((0.05, 0.70), texture_density=0.0, eccentricity=0.20),
    G.EndocapillaryHypercellularity: ClassStyle((0.75, 0.15), texture_density=0.030, feature_size=0.035,
                                                eccentricity=0.35),
    G.MesangialHypercellularity: ClassStyle((0.80, 0.12), texture_density=0.15, feature_size=0.035,
                                            eccentricity=0.30),
    G.ThickGBM: ClassStyle((0.05, 0.60), ring_thickness=0.14, eccentricity=0.30),
    G.Wireloops: ClassStyle((0.02, 0.72), ring_thickness=0.05, texture_density=4, feature_size=0.16,
                            eccentricity=0.25),
    G.HyalineThrombi: ClassStyle((0.00, 0.85), texture_density=3, feature_size=0.14, eccentricity=0.25),
    G.Crescent: ClassStyle((0.55, 0.22), ring_thickness=0.32, texture_density=0.04, eccentricity=0.30),
    G.SegmentalAdhesion: ClassStyle((0.22, 0.55), ring_thickness=0.30, eccentricity=0.35),
}

NON_NORMAL_BASE = (0.30, 0.32)
BACKGROUND = (0.07, 0.17)
CAPSULE = (0.06, 0.40)


@dataclass
class SynthSpec:
    slide_size: tuple[int, int] = (1024, 512)  # (width, height)
    glomeruli_per_slide: tuple[int, int] = (6, 10)
    radius_range: tuple[float, float] = (36.0, 60.0)
    min_gap: float = 6.0
    stain_jitter: float = 0.04
    noise_sigma: float = 1.5
    styles: dict = field(default_factory=lambda: dict(DEFAULT_STYLES))
    max_attempts: int = 2000
    seed: int = 0

    def validate(self) -> "SynthSpec":
        w, h = self.slide_size
        lo, hi = self.glomeruli_per_slide
        if not (0 <= lo <= hi):
            raise ValueError("glomeruli_per_slide must be an increasing non-negative range")
        r_lo, r_hi = self.radius_range
        if not (0 < r_lo <= r_hi) or 2 * WINDOW_REACH * r_hi >= min(w, h):
            raise ValueError("radius_range does not fit inside the slide")
        params = list(self.styles.values())
        if len(set(params)) != len(params):
            raise ValueError("class styles must be pairwise distinct")
        return self


DEFAULT_SIGNATURES: dict[LNClass, tuple[float, ...]] = {
    LNClass.I: (0.80, 0.04, 0.00, 0.10, 0.03, 0.00, 0.00, 0.00, 0.03),
    LNClass.II: (0.35, 0.05, 0.05, 0.45, 0.05, 0.05, 0.00, 0.00, 0.00),
    LNClass.III: (0.25, 0.15, 0.25, 0.10, 0.05, 0.05, 0.02, 0.10, 0.03),
    LNClass.IV: tuple(c / sum(REFERENCE_COUNTS) for c in REFERENCE_COUNTS),
    LNClass.V: (0.15, 0.10, 0.05, 0.10, 0.55, 0.05, 0.00, 0.00, 0.00),
    LNClass.VI: (0.05, 0.80, 0.02, 0.02, 0.05, 0.02, 0.02, 0.02, 0.00),
}


@dataclass
class CohortSpec:
    patients_per_ln_class: int = 10
    signature: dict = field(default_factory=lambda: dict(DEFAULT_SIGNATURES))
    glomeruli_per_patient: tuple[int, int] = (8, 16)
    second_label_prob: float = 0.2
    render: bool = True
    synth: SynthSpec = field(default_factory=SynthSpec)
    seed: int = 0

    def validate(self) -> "CohortSpec":
        sigs = {LNClass.parse(k): np.asarray(v, dtype=np.float64) for k, v in self.signature.items()}
        for k, v in sigs.items():
            if v.shape != (N_GLOM_CLASSES,) or (v < 0).any() or abs(v.sum() - 1) > 1e-9:
                raise ValueError(f"signature for class {k.name} must be a 9-dim probability vector")
        keys = list(sigs)
        for i in range(len(keys)):
            for j in range(i):
                if np.abs(sigs[keys[i]] - sigs[keys[j]]).sum() < 0.3:
                    raise ValueError(f"signatures {keys[i].name} and {keys[j].name} closer than L1 0.3")
        lo, hi = self.glomeruli_per_patient
        if not 1 <= lo <= hi:
            raise ValueError("glomeruli_per_patient must be a positive increasing range")
        if self.render:
            self.synth.validate()
        return self


@dataclass
class Annotation:
    box: BoundingBox
    labels: frozenset

    @property
    def vector(self) -> np.ndarray:
        return to_vector(self.labels)


@dataclass
class Slide:
    slide_id: str
    patient_id: str
    image: np.ndarray | None
    annotations: list[Annotation]
    magnification: str = "20x"
    stain_matrix: np.ndarray | None = None
    extent_map: np.ndarray | None = None  # 0 background, k + 1 for annotation k


@dataclass
class Cohort:
    patients: list[PatientRecord]
    slides: list[Slide]

    def slides_of(self, patient_id: str) -> list[Slide]:
        return [s for s in self.slides if s.patient_id == patient_id]


def _child_seed(*parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])


def _disc(shape, cy, cx, r):
    yy, xx = np.ogrid[: shape[0], : shape[1]]
    return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r


def _ring(shape, cy, cx, r, w):
    yy, xx = np.ogrid[: shape[0], : shape[1]]
    d = np.sqrt((yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2)
    return (d <= r) & (d >= r - w)


def _scatter_dots(rng, region, density, radius):
    """Boolean mask of random discs with centers drawn inside ``region``."""
    ys, xs = np.nonzero(region)
    out = np.zeros(region.shape, dtype=bool)
    if len(ys) == 0 or density <= 0:
        return out
    n = max(1, int(round(density * len(ys) / max(radius, 1.0))))
    pick = rng.choice(len(ys), size=min(n, len(ys)), replace=False)
    for k in pick:
        r = radius * rng.uniform(0.8, 1.25)
        out |= _disc(region.shape, ys[k] + 0.5, xs[k] + 0.5, r)
    return out


def render_layers(class_set: Iterable, styles, radius: float, side: int, rng: np.random.Generator):
    """Concentration map and feature masks of one glomerulus centered in a ``side`` window.

    Returns ``(conc, extent, masks)``: ``conc`` is ``(side, side, 2)`` over the
    glomerulus only (undefined outside ``extent``), ``extent`` the boolean
    footprint, ``masks`` a dict class -> region where its feature was drawn.
    """
    classes = sorted(G(c) for c in class_set)
    if not classes:
        raise ValueError("class set must be non-empty")
    shape = (side, side)
    c = side / 2.0
    ecc = np.mean([styles[k].eccentricity for k in classes]) + rng.uniform(-0.1, 0.1)
    ecc = float(np.clip(ecc, 0.0, 0.7))
    a = radius
    b = radius * math.sqrt(1.0 - ecc * ecc)
    theta = rng.uniform(0, math.pi)
    yy, xx = np.mgrid[0:side, 0:side]
    dx, dy = xx + 0.5 - c, yy + 0.5 - c
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    psi = np.arctan2(v / b, u / a)

    capsule_region = rho <= 1.0
    tuft = rho <= TUFT_RADIUS
    extent = capsule_region.copy()
    conc = np.zeros(shape + (2,))
    conc[capsule_region] = (0.03, 0.05)  # Bowman's space
    conc[(rho > 1.0 - CAPSULE_WIDTH) & capsule_region] = CAPSULE
    masks: dict[G, np.ndarray] = {}

    def paint(mask, hue, cls):
        conc[mask] = hue
        masks[cls] = masks.get(cls, np.zeros(shape, bool)) | mask

    intensity = rng.uniform(0.9, 1.1)
    base = styles[G.Normal].hue if G.Normal in classes else NON_NORMAL_BASE
    conc[tuft] = np.asarray(base) * intensity
    if G.Normal in classes:
        st = styles[G.Normal]
        masks[G.Normal] = tuft.copy()
        lumens = _scatter_dots(rng, rho <= TUFT_RADIUS - 0.1, st.texture_density, st.feature_size * a)
        conc[lumens & tuft] = (0.02, 0.04)
    if G.Sclerosed in classes:
        st = styles[G.Sclerosed]
        paint(tuft, np.asarray(st.hue) * intensity, G.Sclerosed)
    if G.ThickGBM in classes:
        st = styles[G.ThickGBM]
        paint(tuft & (rho >= TUFT_RADIUS - st.ring_thickness), st.hue, G.ThickGBM)
    if G.EndocapillaryHypercellularity in classes:
        st = styles[G.EndocapillaryHypercellularity]
        dots = _scatter_dots(rng, tuft, st.texture_density, st.feature_size * a) & tuft
        paint(dots, st.hue, G.EndocapillaryHypercellularity)
    if G.MesangialHypercellularity in classes:
        st = styles[G.MesangialHypercellularity]
        core = rho <= 0.38
        dots = _scatter_dots(rng, core, st.texture_density, st.feature_size * a) & (rho <= 0.45)
        paint(dots, st.hue, G.MesangialHypercellularity)
    if G.Wireloops in classes:
        st = styles[G.Wireloops]
        r_loop, w = st.feature_size * a, st.ring_thickness * a + 1.0
        for k in range(int(st.texture_density)):
            ang = theta + 2 * math.pi * (k + rng.uniform(-0.15, 0.15)) / st.texture_density
            rr = 0.45 * a
            paint(_ring(shape, c + rr * math.sin(ang), c + rr * math.cos(ang), r_loop, w) & tuft, st.hue, G.Wireloops)
    if G.HyalineThrombi in classes:
        st = styles[G.HyalineThrombi]
        for k in range(int(st.texture_density)):
            ang = rng.uniform(0, 2 * math.pi)
            rr = rng.uniform(0.0, 0.35) * a
            blob = _disc(shape, c + rr * math.sin(ang), c + rr * math.cos(ang), st.feature_size * a) & tuft
            paint(blob, st.hue, G.HyalineThrombi)
    if G.Crescent in classes:
        st = styles[G.Crescent]
        center = rng.uniform(-math.pi, math.pi)
        dpsi = np.angle(np.exp(1j * (psi - center)))
        band = (rho <= 1.0 - CAPSULE_WIDTH) & (rho >= 1.0 - CAPSULE_WIDTH - st.ring_thickness)
        crescent = band & (np.abs(dpsi) <= math.radians(70) * (1.0 - 0.5 * np.abs(dpsi) / math.pi))
        paint(crescent, st.hue, G.Crescent)
        nuclei = _scatter_dots(rng, crescent, st.texture_density, 0.03 * a) & crescent
        conc[nuclei] = (0.85, 0.10)
    if G.SegmentalAdhesion in classes:
        st = styles[G.SegmentalAdhesion]
        center = rng.uniform(-math.pi, math.pi)
        dpsi = np.angle(np.exp(1j * (psi - center)))
        tab = (np.abs(dpsi) <= st.ring_thickness * 0.6) & (rho >= TUFT_RADIUS - 0.15) & (rho <= TAB_REACH)
        paint(tab, st.hue, G.SegmentalAdhesion)
        extent |= tab
    return conc, extent, masks


def _tight_box(mask: np.ndarray, ox: float = 0.0, oy: float = 0.0) -> BoundingBox:
    ys, xs = np.nonzero(mask)
    return BoundingBox(float(ox + xs.min()), float(oy + ys.min()), float(ox + xs.max() + 1), float(oy + ys.max() + 1))


def _background(rng, shape) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal(shape + (2,)), sigma=(6, 6, 0))
    noise /= max(noise.std(), 1e-9)
    conc = np.empty(shape + (2,))
    conc[..., 0] = BACKGROUND[0] + 0.025 * noise[..., 0]
    conc[..., 1] = BACKGROUND[1] + 0.04 * noise[..., 1]
    return np.clip(conc, 0.0, None)


def slide_stain_matrix(rng, jitter: float) -> np.ndarray:
    W = np.abs(PAS_REFERENCE.T + jitter * rng.standard_normal((3, 2)))
    return StainMatrix.from_columns(W).matrix


def _to_rgb(conc, W, rng, noise_sigma):
    img = compose(conc, W).astype(np.float64)
    if noise_sigma > 0:
        img += rng.normal(0.0, noise_sigma, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_glomerulus(
    class_set,
    styles=None,
    side: int = 128,
    seed: int = 0,
    padding: float = 0.1,
    stain_matrix=None,
    noise_sigma: float = 1.5,
    return_masks: bool = False,
):
    """One glomerulus filling a square crop (same framing as a padded detection crop)."""
    styles = DEFAULT_STYLES if styles is None else styles
    rng = np.random.default_rng(_child_seed(seed, 7))
    radius = side / (2.0 * (1.0 + 2.0 * padding))
    conc_g, extent, masks = render_layers(class_set, styles, radius, side, rng)
    conc = _background(rng, (side, side))
    conc[extent] = conc_g[extent]
    W = PAS_REFERENCE.T / np.linalg.norm(PAS_REFERENCE.T, axis=0) if stain_matrix is None else stain_matrix
    W = StainMatrix.from_columns(W).matrix
    img = _to_rgb(conc, W, rng, noise_sigma)
    return (img, masks) if return_masks else img


def generate_slide(
    spec: SynthSpec,
    seed: int,
    label_sets: Sequence[Iterable] | None = None,
    slide_id: str = "slide",
    patient_id: str = "patient",
    return_extent: bool = False,
) -> Slide:
    """Slide with non-overlapping glomeruli and tight box annotations.

    ``label_sets`` fixes the glomeruli to render; otherwise a count is drawn
    from ``spec.glomeruli_per_slide`` with uniformly random single labels.
    """
    spec.validate()
    rng = np.random.default_rng(_child_seed(spec.seed, seed))
    width, height = spec.slide_size
    if label_sets is None:
        n = int(rng.integers(spec.glomeruli_per_slide[0], spec.glomeruli_per_slide[1] + 1))
        label_sets = [{G(int(rng.integers(0, N_GLOM_CLASSES)))} for _ in range(n)]
    label_sets = [frozenset(G(c) for c in s) for s in label_sets]

    conc = _background(rng, (height, width))
    placed: list[tuple[float, float, float]] = []  # (cx, cy, half-size)
    extent_map = np.zeros((height, width), dtype=np.int32) if return_extent else None
    annotations = []
    for labels in label_sets:
        r = float(rng.uniform(*spec.radius_range))
        half = WINDOW_REACH * r
        for _ in range(spec.max_attempts):
            cx = float(rng.uniform(half, width - half))
            cy = float(rng.uniform(half, height - half))
            if all(abs(cx - px) >= half + ph + spec.min_gap or abs(cy - py) >= half + ph + spec.min_gap
                   for px, py, ph in placed):
                break
        else:
            raise RuntimeError("spec too dense: could not place all glomeruli")
        placed.append((cx, cy, half))
        side = int(math.ceil(2 * half))
        x0, y0 = int(round(cx - side / 2)), int(round(cy - side / 2))
        glom, extent, _ = render_layers(labels, spec.styles, r, side, rng)
        window = conc[y0:y0 + side, x0:x0 + side]
        window[extent] = glom[extent]
        if extent_map is not None:
            extent_map[y0:y0 + side, x0:x0 + side][extent] = len(annotations) + 1
        annotations.append(Annotation(_tight_box(extent, x0, y0), labels))
    W = slide_stain_matrix(rng, spec.stain_jitter)
    image = _to_rgb(conc, W, rng, spec.noise_sigma)
    return Slide(slide_id, patient_id, image, annotations, stain_matrix=W, extent_map=extent_map)


def draw_label_sets(signature, n: int, second_label_prob: float, rng) -> list[frozenset]:
    """Primary class from the signature; optionally a second distinct class from the rest."""
    p = np.asarray(signature, dtype=np.float64)
    out = []
    for _ in range(n):
        first = int(rng.choice(N_GLOM_CLASSES, p=p))
        labels = {G(first)}
        rest = p.copy()
        rest[first] = 0.0
        if rest.sum() > 0 and rng.random() < second_label_prob:
            labels.add(G(int(rng.choice(N_GLOM_CLASSES, p=rest / rest.sum()))))
        out.append(frozenset(labels))
    return out


MAGNIFICATIONS = ("10x", "20x", "40x")


def generate_cohort(spec: CohortSpec) -> Cohort:
    """Patients with LN classes, signature-drawn glomeruli and (optionally) rendered slides."""
    spec.validate()
    sigs = {LNClass.parse(k): v for k, v in spec.signature.items()}
    rng = np.random.default_rng(_child_seed(spec.seed, 1))
    per_slide = max(1, spec.synth.glomeruli_per_slide[1])
    patients, slides = [], []
    pid = 0
    for ln in sorted(sigs):
        for _ in range(spec.patients_per_ln_class):
            patient_id = f"P{pid:03d}"
            n = int(rng.integers(spec.glomeruli_per_patient[0], spec.glomeruli_per_patient[1] + 1))
            label_sets = draw_label_sets(sigs[ln], n, spec.second_label_prob, rng)
            n_slides = max(1, math.ceil(n / per_slide))
            chunks = np.array_split(np.arange(n), n_slides)
            slide_ids = []
            for k, idx in enumerate(chunks):
                slide_id = f"{patient_id}_S{k}"
                slide_ids.append(slide_id)
                sets = [label_sets[i] for i in idx]
                mag = MAGNIFICATIONS[(pid + k) % len(MAGNIFICATIONS)]
                if spec.render:
                    s = generate_slide(spec.synth, seed=pid * 1000 + k, label_sets=sets,
                                       slide_id=slide_id, patient_id=patient_id)
                    s.magnification = mag
                else:
                    s = Slide(slide_id, patient_id, None, [Annotation(None, ls) for ls in sets], mag)
                slides.append(s)
            # label order follows slide annotation order
            ordered = [a.labels for s in slides[-n_slides:] for a in s.annotations]
            patients.append(PatientRecord(patient_id, slide_ids, ordered, ln))
            pid += 1
    return Cohort(patients, slides)


def crop_dataset(cohort: Cohort, side: int, seed: int = 0, padding: float = 0.1):
    """Glomerulus crops for every annotation of the cohort, rendered directly at ``side``.

    Faster than cropping rendered slides; framing matches padded detection crops.
    """
    from .augment import LabeledCrop

    crops = []
    for p in cohort.patients:
        for k, labels in enumerate(p.glomerulus_label_sets):
            s = int(_child_seed(seed, int(p.patient_id[1:]), k).generate_state(1)[0])
            img = render_glomerulus(labels, side=side, seed=s, padding=padding)
            crops.append(LabeledCrop(img, to_vector(labels), crop_id=f"{p.patient_id}_g{k}", patient_id=p.patient_id))
    return crops


def binary_crop_dataset(n_per_class: int, side: int, seed: int = 0):
    """Normal vs Sclerosed crops used for 2-way pretraining; labels are one-hot (normal, sclerosed)."""
    from .augment import LabeledCrop

    crops = []
    for cls in (G.Normal, G.Sclerosed):
        for k in range(n_per_class):
            s = int(_child_seed(seed, int(cls), k, 99).generate_state(1)[0])
            img = render_glomerulus({cls}, side=side, seed=s)
            crops.append(LabeledCrop(img, to_vector({cls}), crop_id=f"bin{int(cls)}_{k}"))
    return crops
