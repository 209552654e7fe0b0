import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lnpath.geometry import BoundingBox, Detection, iou, match_detections, nms

from oracles import pixel_iou


def B(*c):
    return BoundingBox(*c)


def D(score, *c):
    return Detection(BoundingBox(*c), score)


coord = st.floats(-500, 500, allow_nan=False, allow_infinity=False)
side = st.floats(0.5, 300, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw):
    x, y, w, h = draw(coord), draw(coord), draw(side), draw(side)
    return BoundingBox(x, y, x + w, y + h)


@st.composite
def detections(draw, max_size=12):
    n = draw(st.integers(0, max_size))
    return [Detection(draw(boxes()), draw(st.floats(0, 1))) for _ in range(n)]


class TestIoU:
    def test_identity(self):
        assert iou(B(0, 0, 10, 10), B(0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert iou(B(0, 0, 10, 10), B(20, 20, 30, 30)) == 0.0

    def test_half_overlap(self):
        a, b = (0, 0, 10, 10), (5, 0, 15, 10)
        assert pixel_iou(a, b) == pytest.approx(1 / 3)
        assert iou(B(*a), B(*b)) == pytest.approx(1 / 3, abs=1e-15)

    @pytest.mark.parametrize("c", [(0, 0, 0, 10), (0, 0, 10, 0), (5, 5, 1, 9), (0, 0, float("nan"), 1)])
    def test_degenerate_rejected(self, c):
        with pytest.raises(ValueError):
            BoundingBox(*c)

    def test_matches_pixel_count_on_integer_boxes(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            a = rng.integers(0, 15, 2).tolist()
            b = rng.integers(0, 15, 2).tolist()
            a += [a[0] + int(rng.integers(1, 10)), a[1] + int(rng.integers(1, 10))]
            b += [b[0] + int(rng.integers(1, 10)), b[1] + int(rng.integers(1, 10))]
            assert iou(B(*a), B(*b)) == pixel_iou(a, b)

    @settings(max_examples=300, deadline=None)
    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0
        if v == 1.0:
            assert a == b or np.allclose(a.as_tuple(), b.as_tuple())


class TestNMS:
    def test_empty(self):
        assert nms([], 0.5) == []

    def test_singleton(self):
        d = D(0.3, 0, 0, 5, 5)
        assert nms([d], 0.5) == [d]

    def test_duplicate_suppressed(self):
        a, b = D(0.8, 0, 0, 10, 10), D(0.9, 0, 0, 10, 10)
        assert nms([a, b], 0.5) == [b]

    def test_chain_keeps_ends(self):
        # A-B and B-C at IoU 0.6; A-C at 1/3 (IoU 0.6 on both links forces A-C > 0)
        a, b, c = D(0.9, 0, 0, 10, 10), D(0.8, 2.5, 0, 12.5, 10), D(0.7, 5, 0, 15, 10)
        assert iou(a.box, b.box) == pytest.approx(0.6)
        assert iou(b.box, c.box) == pytest.approx(0.6)
        assert iou(a.box, c.box) == pytest.approx(1 / 3)
        assert nms([c, a, b], 0.5) == [a, c]

    def test_invalid_threshold(self):
        with pytest.raises(ValueError):
            nms([D(0.5, 0, 0, 1, 1)], 1.5)

    @settings(max_examples=200, deadline=None)
    @given(detections(), st.floats(0, 1))
    def test_idempotent_sorted_and_separated(self, dets, t):
        kept = nms(dets, t)
        assert nms(kept, t) == kept
        scores = [d.score for d in kept]
        assert scores == sorted(scores, reverse=True)
        for i in range(len(kept)):
            for j in range(i):
                assert iou(kept[i].box, kept[j].box) <= t

    def test_kept_count_can_drop_as_threshold_rises(self):
        # greedy NMS is not count-monotone: at 0.55 B survives and removes both C and D
        a = D(0.9, 0, 10 / 3, 10, 40 / 3)
        b, c, d = D(0.8, 0, 0, 10, 10), D(0.7, -2.5, 0, 7.5, 10), D(0.6, 2.5, 0, 12.5, 10)
        assert nms([a, b, c, d], 0.4) == [a, c, d]
        assert nms([a, b, c, d], 0.55) == [a, b]

    def test_threshold_one_keeps_everything(self):
        dets = [D(0.9, 0, 0, 10, 10), D(0.8, 0, 0, 10, 10), D(0.7, 1, 1, 9, 9)]
        assert nms(dets, 1.0) == dets


class TestMatching:
    def test_exact_hit(self):
        m = match_detections([D(0.9, 0, 0, 10, 10)], [B(0, 0, 10, 10)], 0.5)
        assert (len(m.tp), len(m.fp), len(m.fn)) == (1, 0, 0)

    def test_no_preds(self):
        m = match_detections([], [B(0, 0, 10, 10), B(20, 20, 30, 30)], 0.5)
        assert (len(m.tp), len(m.fp), len(m.fn)) == (0, 0, 2)

    def test_two_preds_one_truth(self):
        truth = B(0, 0, 10, 10)
        exact = D(0.9, 0, 0, 10, 10)
        shifted = D(0.8, 2.5, 0, 12.5, 10)  # IoU 0.6
        m = match_detections([shifted, exact], [truth], 0.5)
        assert m.tp == [(1, 0)]
        assert m.fp == [0]

    def test_tie_goes_to_lower_truth_index(self):
        pred = D(0.9, 5, 0, 15, 10)
        m = match_detections([pred], [B(10, 0, 20, 10), B(0, 0, 10, 10)], 0.3)
        assert m.tp == [(0, 0)]

    @settings(max_examples=200, deadline=None)
    @given(detections(8), st.lists(boxes(), max_size=6), st.floats(0, 1))
    def test_counting_identities(self, preds, truths, t):
        m = match_detections(preds, truths, t)
        assert len(m.tp) + len(m.fn) == len(truths)
        assert len(m.tp) + len(m.fp) == len(preds)
        assert len({p for p, _ in m.tp}) == len(m.tp)
        assert len({g for _, g in m.tp}) == len(m.tp)
