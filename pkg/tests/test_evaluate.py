import numpy as np
import pytest

from tinydet.data import SyntheticScene
from tinydet.evaluate import evaluate, mask_scores_for
from tinydet.geometry import Box, Detection
from tinydet.masks import InstanceMask

from oracles import average_precision_reference


def scene_with(boxes, classes, size=64):
    boxes = np.asarray(boxes, dtype=np.float32).reshape(-1, 4)
    masks = np.zeros((len(boxes), size, size), dtype=np.uint8)
    for i, b in enumerate(boxes):
        masks[i, int(b[1]) : int(b[3]), int(b[0]) : int(b[2])] = 1
    return SyntheticScene(
        image=np.zeros((size, size), dtype=np.float32),
        boxes=boxes,
        class_ids=np.asarray(classes, dtype=np.int32),
        masks=masks,
    )


def det(box, score, cls, level=3):
    return Detection(Box(*box), score, cls, level)


def test_perfect_detector_scores_one():
    scene = scene_with([[8, 8, 24, 24]], [0])
    dets = [[det((8, 8, 24, 24), 1.0, 0)]]
    res = evaluate(dets, [scene], num_classes=1)
    assert res.box.ap == pytest.approx(1.0)
    assert res.box.ap50 == pytest.approx(1.0)
    assert res.box.ap75 == pytest.approx(1.0)


def test_iou_060_counts_only_below_its_threshold():
    # det [0,0,10,6] vs gt [0,0,10,10]: IoU = 60/100 = 0.6
    scene = scene_with([[0, 0, 10, 10]], [0])
    dets = [[det((0, 0, 10, 6), 0.9, 0)]]
    res = evaluate(dets, [scene], num_classes=1)
    # thresholds 0.50, 0.55, 0.60 hit (3 of 10); each contributes AP 1
    assert res.box.ap == pytest.approx(3 / 10)
    assert res.box.ap50 == pytest.approx(1.0)
    assert res.box.ap75 == pytest.approx(0.0)


def test_empty_detections_give_zero_ap():
    scene = scene_with([[8, 8, 24, 24]], [0])
    res = evaluate([[]], [scene], num_classes=1)
    assert res.box.ap == 0.0


def test_class_without_gt_is_skipped():
    scene = scene_with([[8, 8, 24, 24]], [0])
    dets = [[det((8, 8, 24, 24), 1.0, 0), det((30, 30, 40, 40), 0.9, 1)]]
    res = evaluate(dets, [scene], num_classes=2)
    assert 1 not in res.box.per_class
    assert res.box.ap == pytest.approx(1.0)  # mean over class 0 only


def test_ap_never_exceeds_ap50():
    rng = np.random.default_rng(0)
    scenes, dets = _random_eval_instance(rng, 6, 2)
    res = evaluate(dets, scenes, num_classes=2)
    assert res.box.ap <= res.box.ap50 + 1e-12


def _random_eval_instance(rng, n_images, n_classes, size=64):
    scenes, dets = [], []
    for _ in range(n_images):
        g = int(rng.integers(1, 4))
        xy = rng.uniform(0, size - 20, size=(g, 2))
        wh = rng.uniform(5, 18, size=(g, 2))
        boxes = np.concatenate([xy, xy + wh], axis=1)
        classes = rng.integers(0, n_classes, size=g)
        scenes.append(scene_with(boxes, classes, size))
        n_det = int(rng.integers(0, 8))
        img_dets = []
        for _ in range(n_det):
            if rng.random() < 0.6 and g > 0:  # jittered copy of a gt
                j = int(rng.integers(0, g))
                jitter = rng.normal(0, 2.0, size=4)
                b = boxes[j] + jitter
                cls = int(classes[j]) if rng.random() < 0.8 else int(
                    rng.integers(0, n_classes))
            else:
                p = rng.uniform(0, size - 15, size=2)
                b = np.concatenate([p, p + rng.uniform(4, 15, size=2)])
                cls = int(rng.integers(0, n_classes))
            b = np.array([min(b[0], b[2]), min(b[1], b[3]),
                          max(b[0], b[2]) + 0.5, max(b[1], b[3]) + 0.5])
            img_dets.append(det(b, float(np.round(rng.uniform(), 2)), cls))
        dets.append(img_dets)
    return scenes, dets


def test_matches_independent_reference_to_1e9():
    rng = np.random.default_rng(42)
    for trial in range(8):
        scenes, dets = _random_eval_instance(rng, 5, 2)
        res = evaluate(dets, scenes, num_classes=2)
        ref_dets = [[(np.array([d.box.x1, d.box.y1, d.box.x2, d.box.y2]),
                      d.score, d.class_id) for d in img] for img in dets]
        ref_gts = [[(s.boxes[i].astype(np.float64), int(s.class_ids[i]))
                    for i in range(len(s.boxes))] for s in scenes]
        gt_areas = [[float(m.sum()) for m in s.masks] for s in scenes]
        ref = average_precision_reference(
            ref_dets, ref_gts, num_classes=2, gt_areas_per_image=gt_areas
        )
        expected = np.mean([np.mean(v) for v in ref.values()])
        assert res.box.ap == pytest.approx(expected, abs=1e-9), f"trial {trial}"
        expected50 = np.mean([v[0] for v in ref.values()])
        assert res.box.ap50 == pytest.approx(expected50, abs=1e-9)


def test_size_buckets_match_reference():
    rng = np.random.default_rng(43)
    scenes, dets = _random_eval_instance(rng, 6, 1, size=128)
    res = evaluate(dets, scenes, num_classes=1)
    factor = (128 / 800.0) ** 2
    ref_dets = [[(np.array([d.box.x1, d.box.y1, d.box.x2, d.box.y2]),
                  d.score, d.class_id) for d in img] for img in dets]
    ref_gts = [[(s.boxes[i].astype(np.float64), int(s.class_ids[i]))
                for i in range(len(s.boxes))] for s in scenes]
    gt_areas = [[float(m.sum()) for m in s.masks] for s in scenes]
    for attr, rng_pair in (
        ("ap_s", (0.0, 32.0**2 * factor)),
        ("ap_m", (32.0**2 * factor, 96.0**2 * factor)),
        ("ap_l", (96.0**2 * factor, np.inf)),
    ):
        ref = average_precision_reference(
            ref_dets, ref_gts, 1, gt_areas_per_image=gt_areas, area_range=rng_pair
        )
        expected = np.mean([np.mean(v) for v in ref.values()]) if ref else 0.0
        assert getattr(res.box, attr) == pytest.approx(expected, abs=1e-9), attr


def test_invariant_to_image_order_and_tie_order():
    rng = np.random.default_rng(44)
    scenes, dets = _random_eval_instance(rng, 6, 2)
    base = evaluate(dets, scenes, num_classes=2)
    perm = rng.permutation(len(scenes))
    shuffled = evaluate([dets[i] for i in perm], [scenes[i] for i in perm],
                        num_classes=2)
    assert shuffled.box.ap == pytest.approx(base.box.ap, abs=1e-12)
    # reverse detections within each image (scores tie at 2 decimals often)
    reversed_dets = [list(reversed(d)) for d in dets]
    rev = evaluate(reversed_dets, scenes, num_classes=2)
    assert rev.box.ap == pytest.approx(base.box.ap, abs=1e-12)
    assert rev.box.ap50 == pytest.approx(base.box.ap50, abs=1e-12)


def test_mask_ap_perfect_and_mismatched():
    scene = scene_with([[8, 8, 24, 24]], [0])
    d = det((8, 8, 24, 24), 0.9, 0)
    perfect = InstanceMask(np.ones((28, 28), dtype=np.float32), Box(8, 8, 24, 24), 0)
    res = evaluate([[d]], [scene], masks_per_image=[[perfect]], num_classes=1)
    assert res.mask.ap == pytest.approx(1.0)
    # empty predicted mask: pixel IoU 0 -> mask AP 0 while box AP stays 1
    empty = InstanceMask(np.zeros((28, 28), dtype=np.float32), Box(8, 8, 24, 24), 0)
    res2 = evaluate([[d]], [scene], masks_per_image=[[empty]], num_classes=1)
    assert res2.box.ap == pytest.approx(1.0)
    assert res2.mask.ap == pytest.approx(0.0)


def test_mask_scores_follow_source_detection():
    d1 = det((0, 0, 10, 10), 0.7, 0)
    d2 = det((20, 20, 40, 40), 0.4, 1)
    masks = [
        InstanceMask(np.ones((28, 28)), Box(20, 20, 40, 40), 1),
        InstanceMask(np.ones((28, 28)), Box(0, 0, 10, 10), 0),
        InstanceMask(np.ones((28, 28)), Box(5, 5, 9, 9), 0),  # no matching det
    ]
    assert mask_scores_for([d1, d2], masks) == [0.4, 0.7, 0.0]
