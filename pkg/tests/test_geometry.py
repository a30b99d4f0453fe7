import numpy as np
import pytest

from tinydet import geometry
from tinydet.geometry import Box, Detection

from oracles import nms_bruteforce


def random_boxes(rng, n, span=100.0):
    xy = rng.uniform(0, span, size=(n, 2))
    wh = rng.uniform(0.5, span / 2, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


class TestIoU:
    def test_identical_boxes(self):
        b = Box(0, 0, 10, 10)
        assert geometry.iou(b, b) == 1.0

    def test_partial_overlap(self):
        a = Box(0, 0, 10, 10)
        b = Box(5, 5, 15, 15)
        assert geometry.iou(a, b) == pytest.approx(25 / 175)

    def test_disjoint(self):
        assert geometry.iou(Box(0, 0, 1, 1), Box(5, 5, 6, 6)) == 0.0

    def test_two_zero_area_boxes(self):
        assert geometry.iou(Box(2, 2, 2, 2), Box(2, 2, 2, 2)) == 0.0

    def test_symmetric_and_bounded_on_random_boxes(self):
        rng = np.random.default_rng(0)
        arr = random_boxes(rng, 200)
        m = geometry.iou_matrix(arr, arr)
        assert np.all(m >= 0) and np.all(m <= 1 + 1e-12)
        np.testing.assert_allclose(m, m.T, atol=1e-12)
        np.testing.assert_allclose(np.diag(m), 1.0)

    def test_matrix_matches_scalar(self):
        rng = np.random.default_rng(1)
        a, b = random_boxes(rng, 20), random_boxes(rng, 15)
        m = geometry.iou_matrix(a, b)
        for i in (0, 7, 19):
            for j in (0, 5, 14):
                expected = geometry.iou(Box.from_array(a[i]), Box.from_array(b[j]))
                assert m[i, j] == pytest.approx(expected, abs=1e-12)


class TestEncodeDecode:
    def test_identity(self):
        b = Box(3, 4, 13, 24)
        d = geometry.encode(b, b)
        assert (d.dx, d.dy, d.dw, d.dh) == (0, 0, 0, 0)

    def test_double_size_formula(self):
        anchor = Box(0, 0, 10, 10)
        gt = Box(0, 0, 20, 20)
        d = geometry.encode(gt, anchor)
        assert d.dx == pytest.approx(0.5)
        assert d.dy == pytest.approx(0.5)
        assert d.dw == pytest.approx(np.log(2))
        assert d.dh == pytest.approx(np.log(2))

    def test_roundtrip_1000_random_pairs(self):
        rng = np.random.default_rng(2)
        gts = random_boxes(rng, 1000)
        anchors = random_boxes(rng, 1000)
        deltas = geometry.encode_boxes(gts, anchors)
        back = geometry.decode_boxes(deltas, anchors)
        assert np.max(np.abs(back - gts)) < 1e-5

    def test_encode_rejects_degenerate_gt(self):
        with pytest.raises(ValueError, match="positive width"):
            geometry.encode(Box(0, 0, 0, 5), Box(0, 0, 10, 10))
        with pytest.raises(ValueError, match="anchors"):
            geometry.encode_boxes(np.array([[0, 0, 5, 5.0]]), np.array([[0, 0, 0, 5.0]]))


class TestClip:
    def test_clamps_to_image(self):
        assert geometry.clip_to_image(Box(-5, -5, 20, 20), 10, 10) == Box(0, 0, 10, 10)

    def test_interior_box_unchanged(self):
        b = Box(2, 3, 6, 7)
        assert geometry.clip_to_image(b, 10, 10) == b

    def test_fully_outside_gives_zero_width(self):
        assert geometry.clip_to_image(Box(-3, 2, -1, 4), 10, 10) == Box(0, 2, 0, 4)


class TestNMS:
    def test_identical_boxes_keep_highest_score(self):
        dets = [
            Detection(Box(0, 0, 10, 10), 0.9, 0, 3),
            Detection(Box(0, 0, 10, 10), 0.8, 0, 3),
        ]
        assert geometry.nms(dets, 0.4) == [0]

    def test_disjoint_boxes_all_kept(self):
        dets = [
            Detection(Box(0, 0, 5, 5), 0.5, 0, 3),
            Detection(Box(20, 20, 30, 30), 0.9, 0, 3),
            Detection(Box(50, 0, 60, 5), 0.7, 0, 3),
        ]
        assert sorted(geometry.nms(dets, 0.4)) == [0, 1, 2]

    def test_empty_input(self):
        assert geometry.nms([], 0.4) == []

    def test_score_ties_break_by_lower_index(self):
        boxes = np.array([[0, 0, 10, 10], [1, 1, 11, 11], [40, 0, 50, 10.0]])
        scores = np.array([0.5, 0.5, 0.5])
        keep = geometry.nms_arrays(boxes, scores, 0.3)
        assert keep.tolist() == [0, 2]

    def test_matches_bruteforce_on_1000_random_boxes(self):
        rng = np.random.default_rng(3)
        boxes = random_boxes(rng, 1000, span=60.0)
        scores = rng.uniform(size=1000)
        keep = geometry.nms_arrays(boxes, scores, 0.4)
        ref = nms_bruteforce(boxes, scores, 0.4)
        assert keep.tolist() == ref

    def test_permutation_invariant_given_distinct_scores(self):
        rng = np.random.default_rng(4)
        boxes = random_boxes(rng, 60, span=40.0)
        scores = rng.permutation(60) / 60.0 + 0.01
        base = set(map(tuple, boxes[geometry.nms_arrays(boxes, scores, 0.4)]))
        for seed in range(3):
            perm = np.random.default_rng(seed).permutation(60)
            kept = geometry.nms_arrays(boxes[perm], scores[perm], 0.4)
            assert set(map(tuple, boxes[perm][kept])) == base


def test_detection_validates_score():
    with pytest.raises(ValueError, match="score"):
        Detection(Box(0, 0, 1, 1), 1.5, 0, 3)


def test_box_aspect_ratio():
    assert geometry.box_aspect_ratio(Box(0, 0, 16, 2)) == 8.0
    assert geometry.box_aspect_ratio(Box(0, 0, 0, 2)) == np.inf
