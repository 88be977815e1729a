import numpy as np
import pytest

from src.detection.detector import GroundTruth
from src.detection.geometry import Box, ScoredBox
from src.pipeline.evaluation import COCO_THRESHOLDS, all_point_ap, evaluate_map, evaluate_model
from src.pipeline.verify import random_boxes


def _det(box, score, cls=0):
    return ScoredBox(Box(*map(float, box)), score, cls)


def _ap_by_ranks(dets, gt_boxes, thresh):
    """Single class, single image: precision envelope summed at each true positive."""
    def iou(a, b):
        iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
        ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
        inter = iw * ih
        return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)

    ranked = sorted(dets, key=lambda d: -d.score)
    used, hits = set(), []
    for d in ranked:
        box = d.box.as_tuple()
        candidates = [(iou(box, g), k) for k, g in enumerate(gt_boxes) if k not in used]
        best = max(candidates, default=(0.0, None))
        if best[1] is not None and best[0] >= thresh:
            used.add(best[1])
            hits.append(True)
        else:
            hits.append(False)
    precisions = [sum(hits[: i + 1]) / (i + 1) for i in range(len(hits))]
    return sum(max(precisions[i:]) for i, h in enumerate(hits) if h) / len(gt_boxes)


def test_perfect_detections_score_one():
    gt = GroundTruth(np.array([[0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]]), np.array([0, 1]))
    dets = [[_det(b, 0.9, int(c)) for b, c in zip(gt.boxes, gt.classes)]]
    result = evaluate_map(dets, [gt])
    assert result.map == 1.0 and result.ap50 == 1.0


def test_no_detections_score_zero():
    gt = GroundTruth(np.array([[0.0, 0.0, 10.0, 10.0]]), np.array([0]))
    result = evaluate_map([[]], [gt])
    assert result.map == 0.0 and result.ap50 == 0.0


def test_worked_example_ap50():
    gt = GroundTruth(np.array([[0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]]), np.array([0, 0]))
    dets = [[_det((0, 0, 10, 10), 0.9), _det((40, 40, 50, 50), 0.8), _det((20, 20, 30, 30), 0.7)]]
    result = evaluate_map(dets, [gt], iou_thresholds=[0.5])
    assert result.ap50 == pytest.approx(5.0 / 6.0)
    assert result.map == pytest.approx(5.0 / 6.0)


def test_classes_without_ground_truth_are_excluded():
    gt = GroundTruth(np.array([[0.0, 0.0, 10.0, 10.0]]), np.array([0]))
    dets = [[_det((0, 0, 10, 10), 0.9, 0), _det((5, 5, 9, 9), 0.95, 2)]]
    result = evaluate_map(dets, [gt], iou_thresholds=[0.5])
    assert result.ap50 == 1.0
    assert set(result.per_class()) == {0}


def test_duplicate_detection_is_a_false_positive():
    gt = GroundTruth(np.array([[0.0, 0.0, 10.0, 10.0]]), np.array([0]))
    dets = [[_det((0, 0, 10, 10), 0.9), _det((0, 0, 10, 10), 0.8)]]
    assert evaluate_map(dets, [gt], iou_thresholds=[0.5]).ap50 == 1.0
    late = [[_det((0, 0, 10, 10), 0.7), _det((30, 30, 40, 40), 0.8)]]
    assert evaluate_map(late, [gt], iou_thresholds=[0.5]).ap50 == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(20))
def test_matches_rank_oracle(seed):
    rng = np.random.default_rng(seed)
    gt_boxes = random_boxes(rng, int(rng.integers(1, 5)))
    det_boxes = np.concatenate([gt_boxes + rng.normal(0, 1.5, size=gt_boxes.shape), random_boxes(rng, 3)])
    det_boxes[:, 2:] = np.maximum(det_boxes[:, 2:], det_boxes[:, :2] + 0.5)
    scores = rng.permutation(len(det_boxes)) / len(det_boxes) + 0.01
    dets = [_det(b, float(s)) for b, s in zip(det_boxes, scores)]
    gt = GroundTruth(gt_boxes, np.zeros(len(gt_boxes), dtype=np.int64))
    for thresh in (0.5, 0.75):
        got = evaluate_map([dets], [gt], iou_thresholds=[thresh]).map
        assert got == pytest.approx(_ap_by_ranks(dets, gt_boxes, thresh), abs=1e-9)


def test_all_point_ap_of_perfect_curve():
    assert all_point_ap(np.array([0.5, 1.0]), np.array([1.0, 1.0])) == 1.0


def test_coco_thresholds():
    assert len(COCO_THRESHOLDS) == 10
    assert COCO_THRESHOLDS[0] == 0.5 and COCO_THRESHOLDS[-1] == 0.95


def test_evaluate_map_rejects_bad_inputs():
    gt = GroundTruth()
    with pytest.raises(ValueError):
        evaluate_map([[], []], [gt])
    with pytest.raises(ValueError):
        evaluate_map([[]], [gt], iou_thresholds=[0.75, 0.5])
    with pytest.raises(ValueError):
        evaluate_map([[]], [gt], iou_thresholds=[])


def test_evaluate_model_is_bounded(detector, image, gt):
    result = evaluate_model(detector, [image, image], [gt, GroundTruth()], {"n_proposals": 16})
    assert 0.0 <= result.map <= 1.0
    assert set(result.to_dict()) == {"ap50", "map", "per_class", "per_threshold"}
