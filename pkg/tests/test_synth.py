import numpy as np
import pytest

from lnpath.classes import GlomerulusClass as G, LNClass, to_vector
from lnpath.geometry import BoundingBox, boxes_to_array, iou, iou_matrix
from lnpath.synth import (
    DEFAULT_SIGNATURES, DEFAULT_STYLES, REFERENCE_COUNTS, CohortSpec, SynthSpec,
    binary_crop_dataset, crop_dataset, generate_cohort, generate_slide, render_glomerulus,
)


def test_render_deterministic():
    a = render_glomerulus({G.Crescent, G.Wireloops}, side=96, seed=5)
    b = render_glomerulus({G.Crescent, G.Wireloops}, side=96, seed=5)
    assert a.dtype == np.uint8 and a.shape == (96, 96, 3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, render_glomerulus({G.Crescent, G.Wireloops}, side=96, seed=6))


def test_empty_class_set_rejected():
    with pytest.raises(ValueError):
        render_glomerulus(set(), side=64)


def test_normal_vs_sclerosed_mean_color():
    n = render_glomerulus({G.Normal}, side=128, seed=3).reshape(-1, 3).astype(float)
    s = render_glomerulus({G.Sclerosed}, side=128, seed=3).reshape(-1, 3).astype(float)
    # compare over the glomerulus interior, a disc of radius side/2.4 * 0.8
    yy, xx = np.mgrid[0:128, 0:128]
    inner = (((yy + 0.5 - 64) ** 2 + (xx + 0.5 - 64) ** 2) <= (128 / 2.4 * 0.6) ** 2).ravel()
    assert np.linalg.norm(n[inner].mean(0) - s[inner].mean(0)) >= 30
    # whole-crop mean colours differ too
    assert np.linalg.norm(n.mean(0) - s.mean(0)) >= 10


def test_multilabel_render_has_both_features():
    img, masks = render_glomerulus({G.Normal, G.ThickGBM}, side=128, seed=1, return_masks=True)
    assert masks[G.Normal].any() and masks[G.ThickGBM].any()
    # the ring lies inside the Normal tuft and occupies its rim only
    ring, tuft = masks[G.ThickGBM], masks[G.Normal]
    assert (ring & tuft).sum() == ring.sum()
    assert ring.sum() < tuft.sum()
    # ring pixels are PAS-dark compared with the normal base
    gray = img.astype(float).mean(axis=2)
    assert gray[ring].mean() < gray[tuft & ~ring].mean() - 10


def test_single_class_styles_separable():
    feats = {}
    for c in G:
        img = render_glomerulus({c}, side=64, seed=11).astype(float)
        feats[c] = np.concatenate([img.mean((0, 1)), img.std((0, 1))])
    keys = list(feats)
    d = min(np.linalg.norm(feats[a] - feats[b]) for i, a in enumerate(keys) for b in keys[:i])
    assert d > 1.0


def test_styles_must_differ():
    styles = dict(DEFAULT_STYLES)
    styles[G.Crescent] = styles[G.Normal]
    with pytest.raises(ValueError):
        SynthSpec(styles=styles).validate()


def test_slide_deterministic():
    spec = SynthSpec(slide_size=(512, 256), glomeruli_per_slide=(3, 4), radius_range=(20, 30))
    a, b = generate_slide(spec, 4), generate_slide(spec, 4)
    assert np.array_equal(a.image, b.image)
    assert [x.box for x in a.annotations] == [x.box for x in b.annotations]
    assert [x.labels for x in a.annotations] == [x.labels for x in b.annotations]


def test_eight_glomeruli_disjoint_boxes():
    spec = SynthSpec(glomeruli_per_slide=(8, 8))
    for seed in range(3):
        s = generate_slide(spec, seed)
        assert len(s.annotations) == 8
        m = iou_matrix(boxes_to_array([a.box for a in s.annotations]),
                       boxes_to_array([a.box for a in s.annotations]))
        off = m[~np.eye(8, dtype=bool)]
        assert (off == 0).all()
        for a in s.annotations:
            b = a.box
            assert 0 <= b.x_min < b.x_max <= 1024 and 0 <= b.y_min < b.y_max <= 512


def test_background_only_slide():
    s = generate_slide(SynthSpec(glomeruli_per_slide=(0, 0)), 0)
    assert s.annotations == []
    assert s.image.shape == (512, 1024, 3)


def test_box_tightly_contains_rendered_extent():
    spec = SynthSpec(glomeruli_per_slide=(8, 8))
    s = generate_slide(spec, 2, return_extent=True)
    assert set(np.unique(s.extent_map)) == set(range(9))
    plain = generate_slide(spec, 2)
    assert np.array_equal(plain.image, s.image)
    for k, a in enumerate(s.annotations):
        ys, xs = np.nonzero(s.extent_map == k + 1)
        rendered = BoundingBox(xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
        assert iou(rendered, a.box) >= 0.9
        # the footprint fills a large part of its box
        assert len(ys) / a.box.area >= 0.6


def test_too_dense():
    spec = SynthSpec(slide_size=(256, 256), glomeruli_per_slide=(20, 20), radius_range=(40, 50),
                     max_attempts=50)
    with pytest.raises(RuntimeError, match="spec too dense"):
        generate_slide(spec, 0)


def test_radius_must_fit():
    with pytest.raises(ValueError):
        SynthSpec(slide_size=(100, 100), radius_range=(40, 60)).validate()


def test_signatures_validated():
    sig = dict(DEFAULT_SIGNATURES)
    assert abs(sum(sig[LNClass.IV]) - 1) < 1e-12
    assert np.allclose(np.array(sig[LNClass.IV]) * 144, REFERENCE_COUNTS)
    bad = {LNClass.I: (1.0,) + (0.0,) * 8, LNClass.II: (0.9, 0.1) + (0.0,) * 7}
    with pytest.raises(ValueError, match="L1"):
        CohortSpec(signature=bad, render=False).validate()
    with pytest.raises(ValueError):
        CohortSpec(signature={LNClass.I: (0.5,) * 9}, render=False).validate()
    CohortSpec(render=False).validate()


def test_one_hot_signature():
    sig = {LNClass.VI: tuple(1.0 if i == G.Sclerosed else 0.0 for i in range(9))}
    c = generate_cohort(CohortSpec(patients_per_ln_class=1, signature=sig, glomeruli_per_patient=(12, 12),
                                   second_label_prob=0.5, render=False))
    assert len(c.patients) == 1
    assert all(s == frozenset({G.Sclerosed}) for s in c.patients[0].glomerulus_label_sets)


def _pooled(cohort):
    V = np.array([to_vector(s) for p in cohort.patients for s in p.glomerulus_label_sets])
    return V


def test_law_of_large_numbers_single_label():
    sig = np.array(DEFAULT_SIGNATURES[LNClass.IV])
    c = generate_cohort(CohortSpec(patients_per_ln_class=30, signature={LNClass.IV: sig},
                                   glomeruli_per_patient=(50, 50), second_label_prob=0.0, render=False, seed=3))
    V = _pooled(c)
    assert V.shape == (1500, 9)
    assert np.abs(V.mean(0) - sig).sum() <= 0.1


def test_law_of_large_numbers_label_shares_with_multilabels():
    sig = np.array(DEFAULT_SIGNATURES[LNClass.IV])
    c = generate_cohort(CohortSpec(patients_per_ln_class=30, signature={LNClass.IV: sig},
                                   glomeruli_per_patient=(50, 50), render=False, seed=3))
    V = _pooled(c)
    assert (V.sum(1) > 1).any()
    assert np.abs(V.sum(0) / V.sum() - sig).sum() <= 0.1


def test_cohort_deterministic_and_structured():
    spec = CohortSpec(patients_per_ln_class=1, synth=SynthSpec(glomeruli_per_slide=(4, 6)),
                      glomeruli_per_patient=(5, 9))
    a, b = generate_cohort(spec), generate_cohort(spec)
    assert len(a.patients) == 6
    assert [p.ln_class for p in a.patients] == list(LNClass)
    for p, q in zip(a.patients, b.patients):
        assert p.glomerulus_label_sets == q.glomerulus_label_sets and p.slide_ids == q.slide_ids
    for s, t in zip(a.slides, b.slides):
        assert np.array_equal(s.image, t.image)
    for p in a.patients:
        slides = a.slides_of(p.patient_id)
        assert [s.slide_id for s in slides] == p.slide_ids
        assert sum(len(s.annotations) for s in slides) == len(p.glomerulus_label_sets)
        assert all(len(s.annotations) <= 6 for s in slides)
    ids = [s.slide_id for s in a.slides]
    assert len(ids) == len(set(ids))


def test_crop_datasets():
    c = generate_cohort(CohortSpec(patients_per_ln_class=1, glomeruli_per_patient=(3, 3), render=False))
    crops = crop_dataset(c, side=32)
    assert len(crops) == 18
    assert all(x.image.shape == (32, 32, 3) for x in crops)
    assert np.array_equal(crops[0].image, crop_dataset(c, side=32)[0].image)
    b = binary_crop_dataset(3, side=32)
    assert len(b) == 6 and b[0].labels[G.Normal] == 1 and b[-1].labels[G.Sclerosed] == 1
