import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lnpath.classes import GlomerulusClass as G
from lnpath.detector import (
    AnchorSpec, AnchorTargets, BoxDelta, DetectorConfig, DetectorModel, assign_anchor_targets, crop_true_positives,
    decode_box, decode_boxes, detect, encode_box, encode_boxes, generate_anchors, square_crop, train_detector,
)
from lnpath.geometry import BoundingBox, Detection, iou, iou_matrix, boxes_to_array, match_detections, nms
from lnpath.nn_common import TrainingError, UntrainedModelError
from lnpath.synth import SynthSpec, generate_slide


# ---------------------------------------------------------------- anchors and box coding

def test_single_anchor():
    a = generate_anchors((16, 16), AnchorSpec(16, (32.0,), (1.0,)))
    assert a.shape == (1, 4)
    assert np.allclose([(a[0, 0] + a[0, 2]) / 2, (a[0, 1] + a[0, 3]) / 2], [8, 8])


def test_anchor_count():
    assert len(generate_anchors((64, 64), AnchorSpec(16, (32.0, 64.0), (1.0,)))) == 32
    assert len(generate_anchors((512, 1024), AnchorSpec())) == 32 * 64 * 9


def test_anchor_ratio_and_area():
    a = generate_anchors((16, 16), AnchorSpec(16, (32.0,), (2.0,)))[0]
    w, h = a[2] - a[0], a[3] - a[1]
    assert abs(w / h - 2.0) < 1e-6
    assert abs(w * h - 32 ** 2) / 32 ** 2 < 0.01


def test_anchor_too_small_image():
    with pytest.raises(ValueError):
        generate_anchors((8, 32), AnchorSpec())


def test_anchor_spec_validation():
    with pytest.raises(ValueError):
        AnchorSpec(16, (), (1.0,))
    with pytest.raises(ValueError):
        AnchorSpec(16, (32.0,), (-1.0,))


def test_encode_identity_and_closed_form():
    a = BoundingBox(10, 20, 50, 80)
    assert encode_box(a, a) == BoxDelta(0.0, 0.0, 0.0, 0.0)
    g = BoundingBox(-10, 20, 70, 80)  # twice as wide, same center and height
    d = encode_box(g, a)
    assert d.tx == 0 and d.ty == 0 and d.th == 0
    assert abs(d.tw - math.log(2.0)) < 1e-12


def test_decode_clips():
    a = BoundingBox(0, 0, 40, 40)
    b = decode_box(BoxDelta(-0.25, 0.0, 0.0, 0.0), a, image_size=(100, 100))
    assert b.as_tuple() == (0.0, 0.0, 30.0, 40.0)
    unclipped = decode_box(BoxDelta(-0.25, 0.0, 0.0, 0.0), a)
    assert unclipped.as_tuple() == (-10.0, 0.0, 30.0, 40.0)


def test_boxdelta_finite():
    with pytest.raises(ValueError):
        BoxDelta(float("nan"), 0, 0, 0)


coords = st.floats(-500, 500, allow_nan=False)
sizes = st.floats(0.5, 400, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(coords, coords, sizes, sizes, coords, coords, sizes, sizes)
def test_roundtrip(gx, gy, gw, gh, ax, ay, aw, ah):
    g = BoundingBox(gx, gy, gx + gw, gy + gh)
    a = BoundingBox(ax, ay, ax + aw, ay + ah)
    back = decode_box(encode_box(g, a), a)
    assert np.allclose(back.as_tuple(), g.as_tuple(), rtol=0, atol=1e-9)


def test_weighted_roundtrip_vectorized():
    rng = np.random.default_rng(0)
    xy = rng.uniform(0, 300, (50, 2))
    wh = rng.uniform(1, 200, (50, 2))
    g = np.c_[xy, xy + wh]
    xy2 = rng.uniform(0, 300, (50, 2))
    a = np.c_[xy2, xy2 + rng.uniform(1, 200, (50, 2))]
    w = (10.0, 10.0, 5.0, 5.0)
    assert np.abs(decode_boxes(encode_boxes(g, a, w), a, w) - g).max() <= 1e-9


# ---------------------------------------------------------------- target assignment

def test_identical_anchor_positive():
    anchors = np.array([[0, 0, 10, 10], [100, 100, 110, 110]], dtype=float)
    t = assign_anchor_targets(anchors, [BoundingBox(0, 0, 10, 10)], 0.7, 0.3)
    assert t.labels[0] == AnchorTargets.POSITIVE
    assert np.all(t.deltas[0] == 0)
    assert t.labels[1] == AnchorTargets.NEGATIVE


def test_low_overlap_negative_and_ignore_band():
    anchors = np.array([[0, 0, 10, 10], [9, 0, 19, 10], [4, 0, 14, 10]], dtype=float)
    gt = [BoundingBox(0, 0, 10, 10)]
    t = assign_anchor_targets(anchors, gt, 0.99, 0.3)
    ious = iou_matrix(anchors, boxes_to_array(gt))[:, 0]
    assert ious[1] < 0.3 and t.labels[1] == AnchorTargets.NEGATIVE
    assert 0.3 <= ious[2] < 0.99 and t.labels[2] == AnchorTargets.IGNORE


def test_forced_positive():
    anchors = np.array([[0, 0, 20, 20], [30, 0, 50, 20]], dtype=float)
    gt = [BoundingBox(5, 5, 25, 25)]  # IoU with anchor 0 is below 0.7
    t = assign_anchor_targets(anchors, gt, 0.7, 0.3)
    assert iou(BoundingBox(*anchors[0]), gt[0]) < 0.7
    assert t.labels[0] == AnchorTargets.POSITIVE
    assert np.allclose(decode_boxes(t.deltas[:1], anchors[:1])[0], gt[0].as_tuple())


def test_no_gt_all_negative():
    t = assign_anchor_targets(np.array([[0, 0, 5, 5.0]]), [], 0.7, 0.3)
    assert t.labels.tolist() == [0]


def test_assignment_invariants_random():
    rng = np.random.default_rng(4)
    anchors = generate_anchors((128, 128), AnchorSpec())
    for _ in range(50):
        n = int(rng.integers(1, 5))
        xy = rng.uniform(0, 100, (n, 2))
        gts = np.c_[xy, xy + rng.uniform(5, 60, (n, 2))]
        t = assign_anchor_targets(anchors, gts, 0.7, 0.3)
        assert set(np.unique(t.labels)) <= {-1, 0, 1}
        ious = iou_matrix(anchors, gts)
        for j in range(n):
            assert (t.labels[ious[:, j] == ious[:, j].max()] == 1).all()
        pos = t.labels == 1
        back = decode_boxes(t.deltas[pos], anchors[pos])
        assert np.allclose(back, gts[t.matched[pos]], atol=1e-9)


def test_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(epochs=0).validate()
    with pytest.raises(ValueError):
        DetectorConfig(pos_iou=0.2, neg_iou=0.3).validate()
    with pytest.raises(ValueError):
        DetectorConfig(backbone_depth=3, channels=(8, 8, 8)).validate()
    cfg = DetectorConfig(epochs=3)
    assert DetectorConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- crops

def test_crop_side_and_labels():
    img = np.zeros((400, 400, 3), np.uint8)
    box = BoundingBox(150, 150, 250, 250)
    assert abs(square_crop(img, box, 0.1).shape[0] - 120) <= 1
    crops = crop_true_positives(img, [Detection(box, 0.9)], [(box, frozenset({G.Sclerosed}))])
    assert len(crops) == 1 and crops[0].labels.tolist() == [0, 1, 0, 0, 0, 0, 0, 0, 0]


def test_crop_fp_contributes_nothing():
    img = np.zeros((400, 400, 3), np.uint8)
    gt = [(BoundingBox(0, 0, 50, 50), frozenset({G.Normal}))]
    assert crop_true_positives(img, [Detection(BoundingBox(300, 300, 350, 350), 0.9)], gt) == []
    assert crop_true_positives(img, [], gt) == []


def test_crop_border_padding_white_and_centered():
    img = np.zeros((20, 100, 3), np.uint8)
    c = square_crop(img, BoundingBox(0, 0, 40, 20), 0.0)
    assert c.shape == (40, 40, 3)
    assert (c[:10] == 255).all() and (c[10:30] == 0).all() and (c[30:] == 255).all()


# ---------------------------------------------------------------- training / inference

SMALL = SynthSpec(slide_size=(384, 256), glomeruli_per_slide=(2, 3), radius_range=(26, 40))


def _data(n, offset=0):
    out = []
    for i in range(n):
        s = generate_slide(SMALL, offset + i)
        out.append((s.image, [a.box for a in s.annotations]))
    return out


@pytest.fixture(scope="module")
def trained():
    cfg = DetectorConfig(epochs=40, batch_size=2, max_side=512, seed=1)
    return train_detector(_data(30), cfg)


def test_untrained_detect_raises():
    with pytest.raises(UntrainedModelError):
        detect(np.zeros((64, 64, 3), np.uint8), DetectorModel(DetectorConfig()))


def test_empty_dataset():
    with pytest.raises(TrainingError):
        train_detector([], DetectorConfig(epochs=1))


def test_nan_loss_aborts():
    img, boxes = _data(1)[0]
    with pytest.raises(TrainingError, match="non-finite"):
        train_detector([(img, boxes)], DetectorConfig(epochs=2, lr=1e30))


def test_overfit_one_and_determinism():
    spec = SynthSpec(slide_size=(256, 256), glomeruli_per_slide=(1, 1), radius_range=(30, 36))
    s = generate_slide(spec, 0)
    data = [(s.image, [a.box for a in s.annotations])]
    cfg = DetectorConfig(epochs=50, seed=3)
    m1 = train_detector(data, cfg)
    h = m1.meta["history"]
    assert h[-1]["total"] < h[0]["total"]
    dets = detect(s.image, m1)
    assert dets and iou(dets[0].box, data[0][1][0]) >= 0.5
    m2 = train_detector(data, cfg)
    assert m2.meta["history"] == h


def test_blank_slide_no_detections(trained):
    blank = generate_slide(SynthSpec(slide_size=(384, 256), glomeruli_per_slide=(0, 0), radius_range=(26, 40)), 99)
    assert detect(blank.image, trained) == []
    assert detect(np.full((256, 384, 3), 255, np.uint8), trained) == []


def test_finds_separated_glomeruli(trained):
    for img, gts in _data(8, offset=500):
        dets = detect(img, trained)
        m = match_detections(dets, gts, 0.5)
        assert len(m.tp) == len(gts)
        assert len(dets) == len(gts)


def test_detect_output_contract(trained):
    img, _ = _data(1, offset=700)[0]
    dets = detect(img, trained)
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)
    for d in dets:
        b = d.box
        assert 0 <= b.x_min < b.x_max <= img.shape[1] and 0 <= b.y_min < b.y_max <= img.shape[0]
    assert nms(dets, trained.config.nms_threshold) == dets
    assert detect(img, trained) == dets


def test_detect_rescales_to_original_coordinates(trained):
    from PIL import Image
    img, gts = _data(1, offset=800)[0]
    big = np.asarray(Image.fromarray(img).resize((img.shape[1] * 2, img.shape[0] * 2), Image.BILINEAR))
    cfg = trained.config
    cfg_small = DetectorConfig(**{**cfg.__dict__, "max_side": max(img.shape[:2])})
    model = DetectorModel(cfg_small, net=trained.net, meta=trained.meta, trained=True)
    dets = detect(big, model)
    m = match_detections(dets, [b.scaled(2.0) for b in gts], 0.5)
    assert len(m.tp) == len(gts)
